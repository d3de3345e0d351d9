//! Objective terms: least-squares adversarial, cross-supervised weighted
//! cross-entropy, L1 cycle consistency, and their weighted total.
//!
//! Expectations are realized as means over the batch and every pixel or
//! patch position.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::types::LabelMap;

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-8;

/// `½·mean((1 − d_real)²) + ½·mean(d_fake²)`.
pub fn lsgan_discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real = d_real.affine(-1.0, 1.0)?.sqr()?.mean_all()?;
    let fake = d_fake.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// `½·mean((d_fake − 1)²)`.
pub fn lsgan_generator_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok((d_fake.affine(1.0, -1.0)?.sqr()?.mean_all()? * 0.5)?)
}

/// `(loss_D, loss_G)` for one discriminator.
pub fn lsgan_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((lsgan_discriminator_loss(d_real, d_fake)?, lsgan_generator_loss(d_fake)?))
}

/// One-hot encoded ground truth, `N × n × H × W`.
#[derive(Debug, Clone)]
pub struct LabelBatch {
    pub onehot: Tensor,
    pub n_classes: usize,
}

impl LabelBatch {
    pub fn new(maps: &[&LabelMap], n_classes: usize, dtype: DType) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::invalid("empty label batch"))?;
        let (h, w) = first.dims();
        let n = maps.len();
        let mut data = vec![0f32; n * n_classes * h * w];
        for (i, m) in maps.iter().enumerate() {
            if m.dims() != (h, w) {
                return Err(Error::shape("label maps in a batch must share a shape"));
            }
            for (p, &label) in m.labels.iter().enumerate() {
                let c = label as usize;
                if c >= n_classes {
                    return Err(Error::invalid(format!("label {c} out of range for {n_classes} classes")));
                }
                data[((i * n_classes + c) * h * w) + p] = 1.0;
            }
        }
        let onehot = Tensor::from_vec(data, (n, n_classes, h, w), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { onehot, n_classes })
    }

    /// Wraps an existing one-hot (or soft) target tensor.
    pub fn from_tensor(onehot: Tensor) -> Result<Self> {
        let n_classes = onehot.dim(1)?;
        Ok(Self { onehot, n_classes })
    }
}

/// `−mean_pixels Σ_c λ_c · t_c · log(max(p_c, 1e-8))`.
pub fn weighted_cross_entropy(probs: &Tensor, target: &LabelBatch, class_weights: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = probs.dims4()?;
    if target.onehot.dims() != probs.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            probs.dims(),
            target.onehot.dims()
        )));
    }
    if class_weights.len() != c {
        return Err(Error::invalid(format!(
            "{} class weights for {c} predicted classes",
            class_weights.len()
        )));
    }
    let weights = Tensor::from_vec(class_weights.to_vec(), (1, c, 1, 1), probs.device())?.to_dtype(probs.dtype())?;
    let logp = probs.maximum(LOG_CLAMP)?.log()?;
    let weighted = target.onehot.broadcast_mul(&weights)?.mul(&logp)?;
    Ok((weighted.sum_all()? * (-1.0 / (n * h * w) as f64))?)
}

/// The four segmentation predictions entering the cross-supervised loss.
#[derive(Debug, Clone, Copy)]
pub struct SegPredictions<'a> {
    /// `S(x)`
    pub s_x: &'a Tensor,
    /// `Q(G(x))`
    pub q_gx: &'a Tensor,
    /// `Q(y)`
    pub q_y: &'a Tensor,
    /// `S(F(y))`
    pub s_fy: &'a Tensor,
}

/// Source labels `s` supervise both `S(x)` and `Q(G(x))`; target labels `q`
/// supervise both `Q(y)` and `S(F(y))`.
pub fn weighted_ce_seg_loss(pred: SegPredictions<'_>, s: &LabelBatch, q: &LabelBatch, class_weights: &[f64]) -> Result<Tensor> {
    let a = weighted_cross_entropy(pred.s_x, s, class_weights)?;
    let b = weighted_cross_entropy(pred.q_gx, s, class_weights)?;
    let c = weighted_cross_entropy(pred.q_y, q, class_weights)?;
    let d = weighted_cross_entropy(pred.s_fy, q, class_weights)?;
    Ok((((a + b)? + c)? + d)?)
}

/// `mean|F(G(x)) − x| + mean|G(F(y)) − y|`.
pub fn cycle_loss(x: &Tensor, fgx: &Tensor, y: &Tensor, gfy: &Tensor) -> Result<Tensor> {
    if x.dims() != fgx.dims() || y.dims() != gfy.dims() {
        return Err(Error::shape(format!(
            "cycle pairs differ in shape: {:?}/{:?} and {:?}/{:?}",
            x.dims(),
            fgx.dims(),
            y.dims(),
            gfy.dims()
        )));
    }
    let fwd = (fgx - x)?.abs()?.mean_all()?;
    let bwd = (gfy - y)?.abs()?.mean_all()?;
    Ok((fwd + bwd)?)
}

/// Unweighted values of every objective term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub gan_g: f64,
    pub gan_f: f64,
    pub gan_dx: f64,
    pub gan_dy: f64,
    pub cyc: f64,
    pub seg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan_g: f64,
    pub gan_f: f64,
    pub gan_dx: f64,
    pub gan_dy: f64,
    pub cyc: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,gan_g,gan_f,gan_dx,gan_dy,cyc,seg,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.gan_g, self.gan_f, self.gan_dx, self.gan_dy, self.cyc, self.seg, self.total
        )
    }
}

/// Weighted total in a fixed order: adversarial terms, then cycle, then
/// segmentation.
pub fn total_objective(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (term, v) in [
        ("gan_g", parts.gan_g),
        ("gan_f", parts.gan_f),
        ("gan_dx", parts.gan_dx),
        ("gan_dy", parts.gan_dy),
        ("cyc", parts.cyc),
        ("seg", parts.seg),
    ] {
        if !v.is_finite() {
            return Err(Error::invalid(format!("loss term `{term}` is not finite ({v})")));
        }
    }
    let gan = parts.gan_g + parts.gan_f + parts.gan_dx + parts.gan_dy;
    let total = weights.lambda_gan * gan + weights.lambda_cyc * parts.cyc + weights.lambda_seg * parts.seg;
    Ok(LossBreakdown {
        gan_g: parts.gan_g,
        gan_f: parts.gan_f,
        gan_dx: parts.gan_dx,
        gan_dy: parts.gan_dy,
        cyc: parts.cyc,
        seg: parts.seg,
        total,
    })
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn full(v: f64, shape: &[usize]) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn lsgan_closed_forms() {
        let (d, g) = lsgan_losses(&full(1.0, &[2, 1, 3, 3]), &full(0.0, &[2, 1, 3, 3])).unwrap();
        assert_eq!((scalar(&d).unwrap(), scalar(&g).unwrap()), (0.0, 0.5));
        let (d, g) = lsgan_losses(&full(0.5, &[1, 1, 4, 4]), &full(0.5, &[1, 1, 4, 4])).unwrap();
        assert!((scalar(&d).unwrap() - 0.25).abs() < 1e-12);
        assert!((scalar(&g).unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn ce_closed_forms() {
        let mask = LabelMap::new(Array2::from_elem((1, 1), 1u8), 2).unwrap();
        let labels = LabelBatch::new(&[&mask], 2, DType::F64).unwrap();
        let uniform = full(0.5, &[1, 2, 1, 1]);
        let p = SegPredictions {
            s_x: &uniform,
            q_gx: &uniform,
            q_y: &uniform,
            s_fy: &uniform,
        };
        let l = scalar(&weighted_ce_seg_loss(p, &labels, &labels, &[0.5, 0.5]).unwrap()).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "{l}");

        let perfect = labels.onehot.clone();
        let p = SegPredictions {
            s_x: &perfect,
            q_gx: &perfect,
            q_y: &perfect,
            s_fy: &perfect,
        };
        assert_eq!(scalar(&weighted_ce_seg_loss(p, &labels, &labels, &[0.5, 0.5]).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let bad = LabelMap {
            labels: Array2::from_elem((2, 2), 3u8),
            n_classes: 2,
        };
        assert!(LabelBatch::new(&[&bad], 2, DType::F64).is_err());
    }

    #[test]
    fn cycle_closed_forms() {
        let x = full(0.3, &[1, 1, 4, 4]);
        let y = full(-0.2, &[1, 1, 4, 4]);
        assert_eq!(scalar(&cycle_loss(&x, &x, &y, &y).unwrap()).unwrap(), 0.0);
        let shifted = (&x + 0.1).unwrap();
        let l = scalar(&cycle_loss(&x, &shifted, &y, &y).unwrap()).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        assert!(cycle_loss(&x, &full(0.0, &[1, 1, 2, 2]), &y, &y).is_err());
    }

    #[test]
    fn total_with_default_weights() {
        let parts = LossParts {
            gan_g: 0.25,
            gan_f: 0.25,
            gan_dx: 0.25,
            gan_dy: 0.25,
            cyc: 0.1,
            seg: 0.2,
        };
        let b = total_objective(&parts, &LossWeights::default()).unwrap();
        assert!((b.total - 2.2).abs() < 1e-12);
        assert_eq!(total_objective(&LossParts::default(), &LossWeights::default()).unwrap().total, 0.0);
        let bad = LossParts { cyc: f64::NAN, ..parts };
        let err = total_objective(&bad, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("cyc"));
    }
}
