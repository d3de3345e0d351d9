//! Spectral normalization by power iteration.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Iterations used when normalizing a weight without persistent state.
pub const STANDALONE_ITERS: usize = 20;

const NORM_EPS: f64 = 1e-12;

fn unit(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?.affine(1.0, NORM_EPS)?;
    Ok(x.broadcast_div(&norm)?)
}

fn as_matrix(weight: &Tensor) -> Result<Tensor> {
    let rows = weight.dim(0)?;
    Ok(weight.reshape((rows, ()))?)
}

/// Runs `iters` rounds of power iteration on `weight` (flattened to
/// `out × rest`) starting from the left vector `u` (`out × 1`). Returns the
/// updated `(u, v)`; both are detached from the graph.
pub fn power_iteration(weight: &Tensor, u: &Tensor, iters: usize) -> Result<(Tensor, Tensor)> {
    let w = as_matrix(&weight.detach())?;
    let mut u = u.detach();
    let mut v = unit(&w.t()?.matmul(&u)?)?;
    for i in 0..iters {
        if i > 0 {
            v = unit(&w.t()?.matmul(&u)?)?;
        }
        u = unit(&w.matmul(&v)?)?;
    }
    Ok((u, v))
}

/// `weight / sigma` where `sigma = uᵀ W v`; differentiable in `weight`.
pub fn normalize_with(weight: &Tensor, u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let w = as_matrix(weight)?;
    let sigma = u.t()?.matmul(&w.matmul(v)?)?.reshape(())?;
    Ok(weight.broadcast_div(&sigma)?)
}

fn is_zero(weight: &Tensor) -> Result<bool> {
    Ok(weight.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0)
}

/// Divides a weight (matrix or conv kernel) by its largest singular value.
/// A zero weight is returned unchanged.
pub fn spectral_normalize(weight: &Tensor, iters: usize) -> Result<Tensor> {
    if is_zero(weight)? {
        return Ok(weight.clone());
    }
    let rows = weight.dim(0)?;
    let u0 = initial_u(rows, weight.dtype(), 0)?;
    let (u, v) = power_iteration(weight, &u0, iters.max(1))?;
    normalize_with(weight, &u, &v)
}

/// Largest singular value estimate `uᵀ W v` after `iters` rounds.
pub fn spectral_norm_estimate(weight: &Tensor, iters: usize) -> Result<f64> {
    let u0 = initial_u(weight.dim(0)?, weight.dtype(), 0)?;
    let (u, v) = power_iteration(weight, &u0, iters.max(1))?;
    let w = as_matrix(weight)?;
    Ok(u.t()?.matmul(&w.matmul(&v)?)?.reshape(())?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub(crate) fn initial_u(rows: usize, dtype: DType, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
    unit(&Tensor::from_vec(v, (rows, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Persistent left singular vector of one spectrally normalized weight.
#[derive(Debug, Clone)]
pub struct SpectralState {
    pub u: Var,
}

impl SpectralState {
    /// Effective weight. With `update` the stored vector advances by one
    /// power-iteration round; otherwise it is only read.
    pub fn apply(&self, weight: &Tensor, update: bool) -> Result<Tensor> {
        if is_zero(weight)? {
            return Ok(weight.clone());
        }
        let (u, v) = power_iteration(weight, self.u.as_tensor(), 1)?;
        if update {
            self.u.set(&u)?;
        }
        normalize_with(weight, &u, &v)
    }
}
