//! Standalone U-Net trained on one domain's originals, used to score
//! harmonized images.

use std::path::Path;

use candle_core::DType;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{scalar, weighted_cross_entropy};
use crate::nets::segmentor::argmax_labels;
use crate::nets::Segmentor;
use crate::optim::Adam;
use crate::params::{Init, ParamStore};
use crate::trainer::{images_to_tensor, segment_padded, Batch};
use crate::types::{LabelMap, Sample};

pub const SEGMENTOR_KIND: &str = "segmentor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentorConfig {
    pub n_classes: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub class_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for SegmentorConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            width: 16,
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            class_weights: vec![0.5, 0.5],
            seed: 0,
        }
    }
}

impl SegmentorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.width == 0 || self.batch_size == 0 {
            return Err(Error::invalid("segmentor needs n_classes >= 2, width >= 1 and batch_size >= 1"));
        }
        if self.class_weights.len() != self.n_classes || self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "segmentor needs {} non-negative class weights, got {:?}",
                self.n_classes, self.class_weights
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("segmentor lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PosthocSegmentor {
    pub store: ParamStore,
    pub net: Segmentor,
    pub config: SegmentorConfig,
}

impl PosthocSegmentor {
    pub fn new(config: &SegmentorConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Segmentor::new(&mut Init::new(&mut store, &mut rng, "SEG"), config.n_classes, config.width)?;
        Ok(Self {
            store,
            net,
            config: config.clone(),
        })
    }

    /// Hard label map for one image of any size.
    pub fn predict(&self, image: &Array2<f32>) -> Result<LabelMap> {
        let x = images_to_tensor(&[image], self.store.dtype())?;
        let probs = segment_padded(&self.net, &x)?;
        LabelMap::new(argmax_labels(&probs)?.remove(0), self.config.n_classes)
    }

    pub fn predict_all(&self, images: &[&Array2<f32>]) -> Result<Vec<LabelMap>> {
        images.iter().map(|i| self.predict(i)).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_value(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ckpt = Checkpoint::new(SEGMENTOR_KIND, 0, meta);
        self.store.write_to(&mut ckpt, "")?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(SEGMENTOR_KIND)?;
        let config: SegmentorConfig =
            serde_json::from_value(ckpt.metadata.clone()).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let seg = Self::new(&config)?;
        seg.store.read_from(ckpt, "")?;
        Ok(seg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains on full slices (sides must be multiples of 8) with weighted
/// cross-entropy. Returns the mean loss of every epoch.
pub fn train_segmentor(
    config: &SegmentorConfig,
    samples: &[Sample],
    mut progress: impl FnMut(usize, f64),
) -> Result<(PosthocSegmentor, Vec<f64>)> {
    let seg = PosthocSegmentor::new(config)?;
    if samples.is_empty() && config.epochs > 0 {
        return Err(Error::Dataset("segmentor training set is empty".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.mask.n_classes != config.n_classes) {
        return Err(Error::Dataset(format!(
            "sample `{}` has {} classes, segmentor expects {}",
            s.image.subject_id, s.mask.n_classes, config.n_classes
        )));
    }
    let mut opt = Adam::new(seg.store.trainable_with_prefix(&["SEG."]), config.lr, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let picked: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let batch = Batch::from_samples(&picked, config.n_classes, DType::F32)?;
            let probs = seg.net.segment(&batch.images)?;
            let loss = weighted_cross_entropy(&probs, &batch.labels, &config.class_weights)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: "segmentor",
                    step: epoch as u64,
                });
            }
            opt.step(&loss.backward()?)?;
            sum += v * chunk.len() as f64;
            n += chunk.len();
        }
        let mean = sum / n as f64;
        progress(epoch, mean);
        losses.push(mean);
    }
    Ok((seg, losses))
}
