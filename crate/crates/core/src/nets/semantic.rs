use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::layers::{global_avg_pool, Conv2d, Linear};
use crate::params::{Dist, Init};

const WIDTHS: [usize; 3] = [16, 32, 64];

/// Shallow strided CNN mapping a soft segmentation to the embedding shared by
/// every renormalized layer of a generator.
#[derive(Debug, Clone)]
pub struct SemanticExtractor {
    convs: Vec<Conv2d>,
    proj: Linear,
    pub n_classes: usize,
    pub embed_dim: usize,
}

impl SemanticExtractor {
    pub fn new(init: &mut Init, n_classes: usize, embed_dim: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(WIDTHS.len());
        let mut c_in = n_classes;
        for (i, &w) in WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(init, &format!("conv{i}"), c_in, w, 3, 2, 1, Dist::He { fan_in: 9 * c_in })?);
            c_in = w;
        }
        let proj = Linear::new(init, "proj", c_in, embed_dim, Dist::He { fan_in: c_in }, Dist::Zeros)?;
        Ok(Self {
            convs,
            proj,
            n_classes,
            embed_dim,
        })
    }

    /// `mask_probs` is `N × n × H × W`; returns `N × E`.
    pub fn extract(&self, mask_probs: &Tensor) -> Result<Tensor> {
        let c = mask_probs.dim(1)?;
        if c != self.n_classes {
            return Err(Error::shape(format!(
                "semantic extractor expects {} classes, got {c}",
                self.n_classes
            )));
        }
        let mut h = mask_probs.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        self.proj.forward(&global_avg_pool(&h)?)
    }
}
