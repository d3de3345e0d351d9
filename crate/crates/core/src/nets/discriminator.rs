//! Spectrally normalized PatchGAN discriminator.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::layers::{conv2d_with, use_param};
use crate::nets::spectral::{initial_u, SpectralState};
use crate::params::{Dist, Init};

/// `(out channels as a multiple of base width, kernel, stride)`; the last
/// entry is the single-channel head.
const LAYOUT: [(usize, usize, usize); 4] = [(1, 4, 2), (2, 4, 2), (4, 4, 1), (0, 4, 1)];
const PADDING: usize = 1;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct SnConv2d {
    pub weight: candle_core::Var,
    pub bias: candle_core::Var,
    pub sn: SpectralState,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// How a forward pass touches discriminator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscMode {
    /// Advance the power-iteration vectors.
    pub update_sn: bool,
    /// Let gradients reach the discriminator's own parameters.
    pub track_params: bool,
}

impl DiscMode {
    pub const TRAIN: DiscMode = DiscMode {
        update_sn: true,
        track_params: true,
    };
    /// Scoring fakes for the generator update: gradients flow to the input
    /// only.
    pub const FROZEN: DiscMode = DiscMode {
        update_sn: false,
        track_params: false,
    };
}

impl SnConv2d {
    fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let mut s = init.sub(name);
        let weight = s.param("weight", &[c_out, c_in, kernel, kernel], Dist::Normal { mean: 0.0, std: 0.02 })?;
        let bias = s.param("bias", &[c_out], Dist::Zeros)?;
        let seed = s.gen_seed();
        let u = s.buffer("sn_u", &[c_out, 1], Dist::Zeros)?;
        u.set(&initial_u(c_out, u.dtype(), seed)?)?;
        Ok(Self {
            weight,
            bias,
            sn: SpectralState { u },
            kernel,
            stride,
            padding: PADDING,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: DiscMode) -> Result<Tensor> {
        let w = use_param(&self.weight, mode.track_params);
        let b = use_param(&self.bias, mode.track_params);
        let w = self.sn.apply(&w, mode.update_sn)?;
        conv2d_with(x, &w, Some(&b), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub layers: Vec<SnConv2d>,
}

impl Discriminator {
    pub fn new(init: &mut Init, base_width: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(LAYOUT.len());
        let mut c_in = 1;
        for (i, &(mult, k, s)) in LAYOUT.iter().enumerate() {
            let c_out = if mult == 0 { 1 } else { mult * base_width };
            layers.push(SnConv2d::new(init, &format!("conv{i}"), c_in, c_out, k, s)?);
            c_in = c_out;
        }
        Ok(Self { layers })
    }

    /// Side length, in input pixels, seen by one output unit.
    pub fn receptive_field(&self) -> usize {
        receptive_field(self.layers.iter().map(|l| (l.kernel, l.stride)))
    }

    /// `N × 1 × H × W` images to an `N × 1 × h × w` grid of patch scores.
    pub fn discriminate(&self, image: &Tensor, mode: DiscMode) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        let rf = self.receptive_field();
        if c != 1 {
            return Err(Error::shape(format!("discriminator expects 1 channel, got {c}")));
        }
        if h < rf || w < rf {
            return Err(Error::shape(format!(
                "discriminator input {h}x{w} is smaller than its {rf}x{rf} receptive field"
            )));
        }
        let mut x = image.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, mode)?;
            if i != last {
                x = x.maximum(&x.affine(LEAK, 0.0)?)?;
            }
        }
        Ok(x)
    }
}

/// Receptive field of a stack of `(kernel, stride)` layers, input first.
pub fn receptive_field(layers: impl DoubleEndedIterator<Item = (usize, usize)>) -> usize {
    layers.rev().fold(1, |r, (k, s)| (r - 1) * s + k)
}
