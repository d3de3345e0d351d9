//! Per-sample channel standardization and the two ways of re-scaling its
//! output: fixed learned affine parameters, or FiLM parameters predicted from
//! a segmentation embedding.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nets::layers::Linear;
use crate::params::{Dist, Init};

/// Added to the standard deviation in the denominator.
pub const STD_EPS: f64 = 1e-5;
/// Keeps the square-root derivative finite on constant channels.
const VAR_FLOOR: f64 = 1e-12;

/// Standardizes every `(n, c)` plane of an `N × C × H × W` map to zero mean
/// and unit (population) standard deviation over its `H × W` extent.
pub fn channel_standardize(h: &Tensor) -> Result<Tensor> {
    let (n, c, hh, ww) = h.dims4()?;
    if c == 0 || hh * ww == 0 {
        return Err(Error::shape(format!("cannot standardize an empty map {:?}", h.dims())));
    }
    let flat = h.reshape((n, c, hh * ww))?;
    // Shift by the first pixel so constant planes cancel exactly; the shift
    // drops out of the centered value, so it carries no gradient.
    let anchor = flat.narrow(2, 0, 1)?.detach();
    let shifted = flat.broadcast_sub(&anchor)?;
    let centered = shifted.broadcast_sub(&shifted.mean_keepdim(2)?)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let std = var.affine(1.0, VAR_FLOOR)?.sqrt()?;
    let out = centered.broadcast_div(&std.affine(1.0, STD_EPS)?)?;
    Ok(out.reshape((n, c, hh, ww))?)
}

/// `gamma[n, c] * h_std[n, c, :, :] + beta[n, c]`.
pub fn modulate(h_std: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = h_std.dims4()?;
    if gamma.dims() != [n, c] || beta.dims() != [n, c] {
        return Err(Error::shape(format!(
            "modulation parameters {:?}/{:?} do not match feature map {:?}",
            gamma.dims(),
            beta.dims(),
            h_std.dims()
        )));
    }
    let g = gamma.reshape((n, c, 1, 1))?;
    let b = beta.reshape((n, c, 1, 1))?;
    Ok(h_std.broadcast_mul(&g)?.broadcast_add(&b)?)
}

/// A pair of fully connected maps from the shared embedding to per-channel
/// scale and shift.
#[derive(Debug, Clone)]
pub struct Film {
    pub fc_gamma: Linear,
    pub fc_beta: Linear,
}

impl Film {
    /// Starts as the identity modulation: zero weights, unit scale bias.
    pub fn new(init: &mut Init, name: &str, embed_dim: usize, channels: usize) -> Result<Self> {
        let mut s = init.sub(name);
        let fc_gamma = Linear::new(&mut s, "fc_gamma", embed_dim, channels, Dist::Zeros, Dist::Const(1.0))?;
        let fc_beta = Linear::new(&mut s, "fc_beta", embed_dim, channels, Dist::Zeros, Dist::Zeros)?;
        Ok(Self { fc_gamma, fc_beta })
    }

    pub fn channels(&self) -> usize {
        self.fc_gamma.weight.dims()[0]
    }

    /// Returns `(gamma, beta)`, each `N × C`.
    pub fn params(&self, emb: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.fc_gamma.forward(emb)?, self.fc_beta.forward(emb)?))
    }
}

/// Applies the FiLM layer's scale and shift to an already standardized map.
pub fn film_modulate(h_std: &Tensor, emb: &Tensor, film: &Film) -> Result<Tensor> {
    let n = h_std.dim(0)?;
    let (en, _) = emb.dims2()?;
    if en != n {
        return Err(Error::shape(format!(
            "embedding batch size {en} does not match feature batch size {n}"
        )));
    }
    let (gamma, beta) = film.params(emb)?;
    modulate(h_std, &gamma, &beta)
}

/// Standardization followed by a learned per-channel affine map; the
/// unconditioned normalization used outside the renormalized generator.
#[derive(Debug, Clone)]
pub struct AffineNorm {
    pub gamma: candle_core::Var,
    pub beta: candle_core::Var,
}

impl AffineNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mut s = init.sub(name);
        let gamma = s.param("gamma", &[channels], Dist::Const(1.0))?;
        let beta = s.param("beta", &[channels], Dist::Zeros)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let c = h.dim(1)?;
        if c != self.gamma.dims()[0] {
            return Err(Error::shape(format!("norm expects {} channels, got {c}", self.gamma.dims()[0])));
        }
        let z = channel_standardize(h)?;
        let g = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let b = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(z.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

/// Per-(n, c) statistics over the spatial extent, for diagnostics and tests.
pub fn plane_mean_std(h: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, hh, ww) = h.dims4()?;
    let flat = h.reshape((n, c, hh * ww))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?;
    Ok((mean.squeeze(D::Minus1)?, var.sqrt()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng) * 3.0 + 1.5)
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        for dtype in [DType::F32, DType::F64] {
            let h = Tensor::full(3.7f64, (1, 2, 8, 8), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
            let out = channel_standardize(&h).unwrap().to_dtype(DType::F64).unwrap();
            let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(v.iter().all(|&x| x == 0.0), "{dtype:?}: {v:?}");
        }
    }

    #[test]
    fn random_input_statistics() {
        let h = randn(&[2, 3, 8, 8], 1);
        let out = channel_standardize(&h).unwrap();
        let (mean, std) = plane_mean_std(&out).unwrap();
        for m in mean.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!(m.abs() < 1e-5, "mean {m}");
        }
        for s in std.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((s - 1.0).abs() < 1e-4, "std {s}");
        }
    }

    #[test]
    fn standardized_input_is_fixed_point() {
        let z = channel_standardize(&randn(&[1, 4, 8, 8], 2)).unwrap();
        let zz = channel_standardize(&z).unwrap();
        let diff = (zz - &z).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn identity_and_annihilating_film() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let film = Film::new(&mut Init::new(&mut store, &mut rng, "f"), "film", 4, 3).unwrap();
        let h = randn(&[2, 3, 4, 4], 3);
        let emb = randn(&[2, 4], 4);
        let out = film_modulate(&h, &emb, &film).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            h.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );

        film.fc_gamma.bias.set(&film.fc_gamma.bias.zeros_like().unwrap()).unwrap();
        let out = film_modulate(&h, &emb, &film).unwrap();
        assert!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn film_rejects_batch_mismatch() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let film = Film::new(&mut Init::new(&mut store, &mut rng, "f"), "film", 4, 3).unwrap();
        let err = film_modulate(&randn(&[2, 3, 4, 4], 0), &randn(&[3, 4], 0), &film).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
