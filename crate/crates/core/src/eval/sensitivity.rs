//! Self-adversarial sensitivity: how much the backward reconstruction moves
//! when the intermediate translation is perturbed by Gaussian noise.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::ssim_signed;
use crate::model::ModelBundle;
use crate::trainer::{images_to_tensor, segment_padded, tensor_to_images};
use crate::types::{Domain, ImageSlice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub sigmas: Vec<f64>,
    pub s_mse: Vec<f64>,
    pub s_ssim: Vec<f64>,
    /// Number of slices averaged per σ.
    pub n: usize,
}

impl SensitivityReport {
    pub const CSV_HEADER: &'static str = "sigma,s_mse,s_ssim";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for ((s, m), q) in self.sigmas.iter().zip(&self.s_mse).zip(&self.s_ssim) {
            out.push_str(&format!("{s},{m},{q}\n"));
        }
        out
    }
}

fn conditioned(bundle: &ModelBundle, from: Domain, x: &Tensor) -> Result<Tensor> {
    let (segmentor, _) = bundle.conditioner(from);
    let probs = segment_padded(segmentor, x)?;
    Ok(bundle.translate_with_mask(from, x, probs, true)?.output)
}

/// Noise generator for slice `i` at sweep position `j`.
fn sub_rng(seed: u64, slice: usize, sigma_idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((slice as u64) << 32) | sigma_idx as u64);
    rng
}

/// For each σ: mean over slices of `‖F(G(x)+η) − F(G(x))‖² / pixels` and of
/// `SSIM(F(G(x)+η), F(G(x)))`, with `η ~ N(0, σ²)` drawn afresh per slice.
pub fn sensitivity_curve(bundle: &ModelBundle, slices_x: &[ImageSlice], sigmas: &[f64], seed: u64) -> Result<SensitivityReport> {
    if slices_x.is_empty() {
        return Err(Error::invalid("sensitivity needs at least one slice"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::invalid(format!("noise levels must be finite and >= 0, got {s}")));
    }
    let k = sigmas.len();
    let mut mse = vec![0.0; k];
    let mut ss = vec![0.0; k];
    for (i, slice) in slices_x.iter().enumerate() {
        slice.check_translatable()?;
        let x = images_to_tensor(&[&slice.data], bundle.store.dtype())?;
        let gx = conditioned(bundle, Domain::Source, &x)?;
        let base = tensor_to_images(&conditioned(bundle, Domain::Target, &gx)?)?.remove(0);
        let gx_img = tensor_to_images(&gx)?.remove(0);
        for (j, &sigma) in sigmas.iter().enumerate() {
            let mut rng = sub_rng(seed, i, j);
            let noise = Normal::new(0.0f32, sigma as f32).map_err(|e| Error::invalid(e.to_string()))?;
            let noisy = gx_img.mapv(|v| v + noise.sample(&mut rng));
            let t = images_to_tensor(&[&noisy], bundle.store.dtype())?;
            let rec = tensor_to_images(&conditioned(bundle, Domain::Target, &t)?)?.remove(0);
            let err: f64 = rec.iter().zip(base.iter()).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
            mse[j] += err / rec.len() as f64;
            ss[j] += ssim_signed(&rec, &base)?;
        }
    }
    let n = slices_x.len();
    Ok(SensitivityReport {
        sigmas: sigmas.to_vec(),
        s_mse: mse.into_iter().map(|v| v / n as f64).collect(),
        s_ssim: ss.into_iter().map(|v| v / n as f64).collect(),
        n,
    })
}
