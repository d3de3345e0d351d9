//! Image and label containers shared by every stage of the pipeline.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which scanner an image was acquired on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "x" | "X" => Ok(Domain::Source),
            "target" | "y" | "Y" => Ok(Domain::Target),
            other => Err(Error::invalid(format!("unknown domain `{other}`"))),
        }
    }
}

/// A single-channel 2D slice. Intensities are expected in `[-1, 1]` once
/// normalized by the data loader.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    pub data: Array2<f32>,
    pub domain: Domain,
    pub subject_id: String,
    pub slice_index: usize,
}

impl ImageSlice {
    pub fn new(data: Array2<f32>, domain: Domain, subject_id: impl Into<String>, slice_index: usize) -> Self {
        Self {
            data,
            domain,
            subject_id: subject_id.into(),
            slice_index,
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Both spatial dimensions must be divisible by 4 for the generator's two
    /// downsampling stages.
    pub fn check_translatable(&self) -> Result<()> {
        let (h, w) = self.dims();
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "slice {}#{} is {h}x{w}; both dimensions must be positive multiples of 4",
                self.subject_id, self.slice_index
            )));
        }
        Ok(())
    }
}

/// Integer class labels, class 0 being background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Array2<u8>,
    pub n_classes: usize,
}

impl LabelMap {
    pub fn new(labels: Array2<u8>, n_classes: usize) -> Result<Self> {
        let map = Self { labels, n_classes };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > 256 {
            return Err(Error::invalid(format!(
                "n_classes must be in [2, 256], got {}",
                self.n_classes
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&v| v as usize >= self.n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Number of pixels carrying `class_id`.
    pub fn count(&self, class_id: usize) -> usize {
        self.labels.iter().filter(|&&v| v as usize == class_id).count()
    }
}

/// An image with its spatially aligned ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageSlice,
    pub mask: LabelMap,
}

impl Sample {
    pub fn new(image: ImageSlice, mask: LabelMap) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::shape(format!(
                "image {:?} and mask {:?} are not aligned",
                image.dims(),
                mask.dims()
            )));
        }
        Ok(Self { image, mask })
    }
}
