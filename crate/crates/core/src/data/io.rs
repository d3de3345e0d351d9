//! On-disk datasets: 16-bit grayscale PNG images, 8-bit PNG label maps, and
//! a JSON manifest tying them together.
//!
//! ```json
//! {"domain": "source", "n_classes": 2,
//!  "samples": [{"image": "images/p0000.png", "mask": "masks/p0000.png",
//!               "subject": "p0000", "split": "train"}]}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::normalize::normalize_slice;
use crate::error::{Error, Result};
use crate::types::{Domain, ImageSlice, LabelMap, Sample};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub subject: String,
    pub split: Split,
    #[serde(default)]
    pub slice: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: Domain,
    pub n_classes: usize,
    /// Images are stored already mapped to `[-1, 1]` (as written by
    /// harmonization) and are read back without renormalizing.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub normalized: bool,
    pub samples: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(domain: Domain, n_classes: usize, root: impl Into<PathBuf>) -> Self {
        Self {
            domain,
            n_classes,
            normalized: false,
            samples: Vec::new(),
            root: root.into(),
        }
    }

    /// Parses and validates manifest JSON.
    pub fn parse(json: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest =
            serde_json::from_str(json).map_err(|e| Error::Manifest(format!("malformed manifest: {e}")))?;
        m.root = root.into();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.n_classes) {
            return Err(Error::Manifest(format!("n_classes must be in [2, 256], got {}", self.n_classes)));
        }
        let mut splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for e in &self.samples {
            if e.image.is_empty() {
                return Err(Error::Manifest(format!("subject `{}` has an empty image path", e.subject)));
            }
            splits.entry(&e.subject).or_default().insert(e.split);
        }
        if let Some((subject, _)) = splits.iter().find(|(_, s)| s.len() > 1) {
            return Err(Error::Manifest(format!(
                "subject `{subject}` appears in both train and test splits"
            )));
        }
        Ok(())
    }

    /// Reads `manifest.json` from a directory (or the given file).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", file.display())),
            other => other,
        })
    }

    pub fn save(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let file = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))
    }

    pub fn entries(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| split.is_none_or(|s| e.split == s))
    }

    pub fn has_masks(&self) -> bool {
        self.samples.iter().all(|e| e.mask.is_some())
    }
}

/// Maps `[-1, 1]` onto the full 16-bit range.
pub fn quantize(x: f32) -> u16 {
    (((x.clamp(-1.0, 1.0) as f64 + 1.0) * 0.5 * 65535.0).round()) as u16
}

pub fn dequantize(q: u16) -> f32 {
    (q as f64 / 65535.0 * 2.0 - 1.0) as f32
}

/// Snaps every value onto the 16-bit grid used on disk.
pub fn snap_to_grid(img: &Array2<f32>) -> Array2<f32> {
    img.mapv(|v| dequantize(quantize(v)))
}

pub fn write_u16_png(path: &Path, data: &Array2<u16>) -> Result<()> {
    let (h, w) = data.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data.iter().copied().collect())
        .ok_or_else(|| Error::Image {
            path: path.into(),
            message: "buffer size mismatch".into(),
        })?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn read_u16_png(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("dimensions match buffer"))
}

/// Writes a `[-1, 1]` image as 16-bit PNG.
pub fn write_image_png(path: &Path, img: &Array2<f32>) -> Result<()> {
    write_u16_png(path, &img.mapv(quantize))
}

/// Inverse of [`write_image_png`]; exact for images already on the 16-bit
/// grid.
pub fn read_image_png(path: &Path) -> Result<Array2<f32>> {
    Ok(read_u16_png(path)?.mapv(dequantize))
}

pub fn write_mask_png(path: &Path, mask: &LabelMap) -> Result<()> {
    let (h, w) = mask.dims();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, mask.labels.iter().copied().collect())
        .ok_or_else(|| Error::Image {
            path: path.into(),
            message: "buffer size mismatch".into(),
        })?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn read_mask_png(path: &Path, n_classes: usize) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Image {
                path: path.into(),
                message: format!("label maps must be 8-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    let labels = Array2::from_shape_vec((h as usize, w as usize), gray.into_raw()).expect("dimensions match buffer");
    LabelMap::new(labels, n_classes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// One entry as read from disk, image normalized to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct LoadedSlice {
    pub image: ImageSlice,
    pub mask: Option<LabelMap>,
    /// File name of the image, for mirroring outputs.
    pub file_name: String,
}

pub fn load_entry(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<LoadedSlice> {
    let image_path = manifest.root.join(&entry.image);
    let data = if manifest.normalized {
        read_image_png(&image_path)?
    } else {
        normalize_slice(&read_u16_png(&image_path)?.mapv(f64::from))
    };
    let image = ImageSlice::new(data, manifest.domain, entry.subject.clone(), entry.slice);
    let mask = match &entry.mask {
        Some(m) => {
            let mask = read_mask_png(&manifest.root.join(m), manifest.n_classes)?;
            if mask.dims() != image.dims() {
                return Err(Error::Dataset(format!(
                    "{}: mask is {:?} but image is {:?}",
                    m,
                    mask.dims(),
                    image.dims()
                )));
            }
            Some(mask)
        }
        None => None,
    };
    let file_name = Path::new(&entry.image)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.image.clone());
    Ok(LoadedSlice { image, mask, file_name })
}

/// Loads images whose masks may be absent.
pub fn load_slices(manifest: &DatasetManifest, split: Option<Split>) -> Result<Vec<LoadedSlice>> {
    manifest.entries(split).map(|e| load_entry(manifest, e)).collect()
}

/// Loads image/mask pairs; every entry must carry a mask.
pub fn load_dataset(manifest: &DatasetManifest, split: Option<Split>) -> Result<Vec<Sample>> {
    manifest
        .entries(split)
        .map(|e| {
            if e.mask.is_none() {
                return Err(Error::Dataset(format!("image `{}` has no mask", e.image)));
            }
            let s = load_entry(manifest, e)?;
            Sample::new(s.image, s.mask.expect("checked above"))
        })
        .collect()
}

/// Writes one sample as `images/<stem>.png` and `masks/<stem>.png` under
/// `dir`, returning the manifest entry.
pub fn write_sample(dir: &Path, stem: &str, sample: &Sample, split: Split) -> Result<ManifestEntry> {
    let (img_rel, mask_rel) = (format!("images/{stem}.png"), format!("masks/{stem}.png"));
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_image_png(&dir.join(&img_rel), &sample.image.data)?;
    write_mask_png(&dir.join(&mask_rel), &sample.mask)?;
    Ok(ManifestEntry {
        image: img_rel,
        mask: Some(mask_rel),
        subject: sample.image.subject_id.clone(),
        split,
        slice: sample.image.slice_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_subject_in_both_splits() {
        let json = r#"{"domain":"source","n_classes":2,"samples":[
            {"image":"a.png","mask":"am.png","subject":"s1","split":"train"},
            {"image":"b.png","mask":"bm.png","subject":"s1","split":"test"}]}"#;
        let err = DatasetManifest::parse(json, ".").unwrap_err();
        assert!(err.to_string().contains("s1"));
    }

    #[test]
    fn parses_and_reserializes() {
        let json = r#"{"domain":"target","n_classes":3,"samples":[
            {"image":"a.png","subject":"s1","split":"train"}]}"#;
        let m = DatasetManifest::parse(json, "/tmp").unwrap();
        assert_eq!(m.domain, Domain::Target);
        assert!(!m.has_masks());
        let again = DatasetManifest::parse(&serde_json::to_string(&m).unwrap(), "/tmp").unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn sample_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array2::from_shape_fn((8, 12), |(i, j)| ((i * 12 + j) as f32 / 95.0) * 2.0 - 1.0);
        let image = ImageSlice::new(snap_to_grid(&data), Domain::Source, "s0", 3);
        let mask = LabelMap::new(Array2::from_shape_fn((8, 12), |(i, j)| ((i + j) % 3) as u8), 3).unwrap();
        let sample = Sample::new(image, mask).unwrap();
        let entry = write_sample(dir.path(), "s0", &sample, Split::Train).unwrap();
        let back = read_image_png(&dir.path().join(&entry.image)).unwrap();
        assert!(back.iter().zip(sample.image.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let m = read_mask_png(&dir.path().join(entry.mask.unwrap()), 3).unwrap();
        assert_eq!(m, sample.mask);
    }

    #[test]
    fn mask_label_out_of_range_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let bad = LabelMap {
            labels: Array2::from_elem((4, 4), 5u8),
            n_classes: 6,
        };
        write_mask_png(&path, &bad).unwrap();
        assert!(read_mask_png(&path, 2).is_err());
    }

    #[test]
    fn missing_mask_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_image_png(&dir.path().join("a.png"), &Array2::zeros((4, 4))).unwrap();
        let mut m = DatasetManifest::new(Domain::Source, 2, dir.path());
        m.samples.push(ManifestEntry {
            image: "a.png".into(),
            mask: None,
            subject: "a".into(),
            split: Split::Train,
            slice: 0,
        });
        assert!(load_dataset(&m, None).is_err());
        assert_eq!(load_slices(&m, None).unwrap().len(), 1);
    }
}
