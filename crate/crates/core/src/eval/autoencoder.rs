//! Multitask autoencoder used as the feature extractor for FID and KID.
//!
//! Residual encoder and decoder with no skip connections between them, plus a
//! domain classifier on the spatially pooled bottleneck.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::metrics::FeatureSet;
use crate::losses::scalar;
use crate::nets::layers::{global_avg_pool, Conv2d, ConvTranspose2d, Linear};
use crate::optim::Adam;
use crate::params::{Dist, Init, ParamStore};
use crate::trainer::{images_to_tensor, tensor_to_images};
use crate::types::Domain;

pub const EXTRACTOR_KIND: &str = "extractor";
const INIT: Dist = Dist::Normal { mean: 0.0, std: 0.02 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub width: usize,
    /// Number of stride-2 stages; inputs must be divisible by `2^levels`.
    pub levels: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub constant_epochs: usize,
    pub decay_epochs: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            width: 16,
            levels: 3,
            batch_size: 64,
            lr: 1e-3,
            constant_epochs: 20,
            decay_epochs: 100,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.levels == 0 || self.levels > 6 || self.batch_size == 0 {
            return Err(Error::invalid("autoencoder width, levels (1..=6) and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("autoencoder lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.width << self.levels
    }

    /// Learning rate for a zero-based epoch: constant, then linear decay that
    /// would reach zero one epoch after the last.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.constant_epochs {
            self.lr
        } else {
            let k = (epoch - self.constant_epochs) as f64;
            self.lr * (1.0 - k / self.decay_epochs.max(1) as f64).max(0.0)
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.constant_epochs + self.decay_epochs
    }
}

#[derive(Debug, Clone)]
struct ResDown {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

impl ResDown {
    fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            conv1: Conv2d::new(&mut s, "conv1", c_in, c_out, 3, 2, 1, INIT)?,
            conv2: Conv2d::new(&mut s, "conv2", c_out, c_out, 3, 1, 1, INIT)?,
            skip: Conv2d::new(&mut s, "skip", c_in, c_out, 1, 2, 0, INIT)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok((h + self.skip.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct ResUp {
    up: ConvTranspose2d,
    conv: Conv2d,
}

impl ResUp {
    fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            up: ConvTranspose2d::new(&mut s, "up", c_in, c_out, 2, 2, 0, 0, INIT)?,
            conv: Conv2d::new(&mut s, "conv", c_out, c_out, 3, 1, 1, INIT)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let u = self.up.forward(x)?.relu()?;
        Ok((&u + self.conv.forward(&u)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub store: ParamStore,
    pub config: AutoencoderConfig,
    stem: Conv2d,
    down: Vec<ResDown>,
    up: Vec<ResUp>,
    out: Conv2d,
    classifier: Linear,
}

pub struct AutoencoderOutput {
    pub reconstruction: Tensor,
    /// Domain logit, `N × 1`; positive means target.
    pub logit: Tensor,
    /// Pooled bottleneck, `N × D`.
    pub features: Tensor,
}

impl FeatureExtractor {
    pub fn new(config: &AutoencoderConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut store, &mut rng, "AE");
        let w = config.width;
        let stem = Conv2d::new(&mut init, "stem", 1, w, 3, 1, 1, INIT)?;
        let down = (0..config.levels)
            .map(|i| ResDown::new(&mut init, &format!("down{i}"), w << i, w << (i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..config.levels)
            .rev()
            .map(|i| ResUp::new(&mut init, &format!("up{i}"), w << (i + 1), w << i))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(&mut init, "out", w, 1, 3, 1, 1, INIT)?;
        let classifier = Linear::new(&mut init, "classifier", config.feature_dim(), 1, INIT, Dist::Zeros)?;
        Ok(Self {
            store,
            config: config.clone(),
            stem,
            down,
            up,
            out,
            classifier,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let m = 1 << self.config.levels;
        if c != 1 || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "extractor input must be 1-channel with sides divisible by {m}, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x)?.relu()?;
        for d in &self.down {
            h = d.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<AutoencoderOutput> {
        let z = self.encode(x)?;
        let features = global_avg_pool(&z)?;
        let logit = self.classifier.forward(&features)?;
        let mut h = z;
        for u in &self.up {
            h = u.forward(&h)?;
        }
        Ok(AutoencoderOutput {
            reconstruction: self.out.forward(&h)?.tanh()?,
            logit,
            features,
        })
    }

    /// Pooled bottleneck features, one row per image.
    pub fn extract(&self, images: &[&Array2<f32>], tag: &str) -> Result<FeatureSet> {
        let d = self.config.feature_dim();
        let mut rows = Vec::with_capacity(images.len() * d);
        // Runs of equally sized images share a forward pass.
        let mut i = 0;
        while i < images.len() {
            let mut j = i + 1;
            while j < images.len() && j - i < self.config.batch_size && images[j].dim() == images[i].dim() {
                j += 1;
            }
            let x = images_to_tensor(&images[i..j], self.store.dtype())?;
            let f = global_avg_pool(&self.encode(&x)?)?;
            rows.extend(f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
            i = j;
        }
        let features = Array2::from_shape_vec((images.len(), d), rows).map_err(|e| Error::shape(e.to_string()))?;
        Ok(FeatureSet::new(features, tag))
    }

    /// Reconstructions, in the same order as `images`.
    pub fn reconstruct(&self, images: &[&Array2<f32>]) -> Result<Vec<Array2<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let x = images_to_tensor(&[*img], self.store.dtype())?;
            out.extend(tensor_to_images(&self.forward(&x)?.reconstruction)?);
        }
        Ok(out)
    }

    /// Probability that each image comes from the target domain.
    pub fn classify(&self, images: &[&Array2<f32>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let x = images_to_tensor(&[*img], self.store.dtype())?;
            let z = scalar(&self.forward(&x)?.logit.flatten_all()?.get(0)?)?;
            out.push(1.0 / (1.0 + (-z).exp()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_value(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ckpt = Checkpoint::new(EXTRACTOR_KIND, 0, meta);
        self.store.write_to(&mut ckpt, "")?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(EXTRACTOR_KIND)?;
        let config: AutoencoderConfig =
            serde_json::from_value(ckpt.metadata.clone()).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let ae = Self::new(&config, DType::F32)?;
        ae.store.read_from(ckpt, "")?;
        Ok(ae)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Numerically stable `mean(softplus(z) − t·z)`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.relu()? + ((logits.abs()?.neg()?.exp()? + 1.0)?.log()?))?;
    Ok((softplus - (logits * targets)?)?.mean_all()?)
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub l1: f64,
    pub bce: f64,
}

/// Trains on the union of both domains: L1 reconstruction plus domain BCE,
/// equally weighted.
pub fn train_feature_extractor(
    config: &AutoencoderConfig,
    images: &[(&Array2<f32>, Domain)],
    mut progress: impl FnMut(&EpochLoss),
) -> Result<(FeatureExtractor, Vec<EpochLoss>)> {
    let has = |d: Domain| images.iter().any(|(_, dd)| *dd == d);
    if !has(Domain::Source) || !has(Domain::Target) {
        return Err(Error::Dataset(
            "the feature extractor needs images from both domains to train its classifier".into(),
        ));
    }
    let ae = FeatureExtractor::new(config, DType::F32)?;
    let mut opt = Adam::new(ae.store.trainable_with_prefix(&["AE."]), config.lr, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(config.total_epochs());
    for epoch in 0..config.total_epochs() {
        opt.lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut l1_sum, mut bce_sum, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let imgs: Vec<&Array2<f32>> = chunk.iter().map(|&i| images[i].0).collect();
            let labels: Vec<f32> = chunk.iter().map(|&i| (images[i].1 == Domain::Target) as u8 as f32).collect();
            let x = images_to_tensor(&imgs, DType::F32)?;
            let t = Tensor::from_vec(labels, (chunk.len(), 1), x.device())?;
            let out = ae.forward(&x)?;
            let l1 = (&out.reconstruction - &x)?.abs()?.mean_all()?;
            let bce = bce_with_logits(&out.logit, &t)?;
            let loss = (&l1 + &bce)?;
            let (l1v, bcev) = (scalar(&l1)?, scalar(&bce)?);
            if !l1v.is_finite() || !bcev.is_finite() {
                return Err(Error::NonFinite {
                    term: "extractor",
                    step: epoch as u64,
                });
            }
            opt.step(&loss.backward()?)?;
            l1_sum += l1v * chunk.len() as f64;
            bce_sum += bcev * chunk.len() as f64;
            n += chunk.len();
        }
        let e = EpochLoss {
            epoch,
            lr: opt.lr,
            l1: l1_sum / n as f64,
            bce: bce_sum / n as f64,
        };
        progress(&e);
        log.push(e);
    }
    Ok((ae, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_constant_then_linear() {
        let c = AutoencoderConfig {
            constant_epochs: 2,
            decay_epochs: 4,
            ..AutoencoderConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|e| c.lr_at(e)).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 0.75e-3, 0.5e-3, 0.25e-3]);
    }

    #[test]
    fn bce_matches_closed_form() {
        let dev = candle_core::Device::Cpu;
        let z = Tensor::new(&[[0.0f64], [2.0], [-3.0]], &dev).unwrap();
        let t = Tensor::new(&[[1.0f64], [0.0], [1.0]], &dev).unwrap();
        let got = scalar(&bce_with_logits(&z, &t).unwrap()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = -((sig(0.0)).ln() + (1.0 - sig(2.0)).ln() + sig(-3.0).ln()) / 3.0;
        assert!((got - want).abs() < 1e-12, "{got} {want}");
    }

    #[test]
    fn feature_dim_independent_of_input_size() {
        let c = AutoencoderConfig {
            width: 2,
            levels: 2,
            ..AutoencoderConfig::default()
        };
        let ae = FeatureExtractor::new(&c, DType::F32).unwrap();
        let a = Array2::from_shape_fn((8, 8), |(i, j)| (i * j) as f32 / 64.0);
        let b = Array2::from_shape_fn((16, 12), |(i, j)| (i + j) as f32 / 28.0);
        let f = ae.extract(&[&a, &b, &a], "t").unwrap();
        assert_eq!(f.features.dim(), (3, c.feature_dim()));
        assert_eq!(f.features.row(0), f.features.row(2));
    }

    #[test]
    fn single_domain_rejected() {
        let a = Array2::zeros((8, 8));
        let r = train_feature_extractor(&AutoencoderConfig::default(), &[(&a, Domain::Source)], |_| {});
        assert!(r.is_err());
    }
}
