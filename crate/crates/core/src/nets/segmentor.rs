//! Four-level U-Net producing per-class probability maps.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::layers::{softmax_channels, Conv2d, ConvTranspose2d};
use crate::nets::norm::AffineNorm;
use crate::params::{Dist, Init};

pub const DEPTH: usize = 4;

/// Input sides must be divisible by this (one halving per level below the
/// top).
pub const SIZE_MULTIPLE: usize = 1 << (DEPTH - 1);

#[derive(Debug, Clone)]
struct DoubleConv {
    c1: Conv2d,
    n1: AffineNorm,
    c2: Conv2d,
    n2: AffineNorm,
}

impl DoubleConv {
    fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(Self {
            c1: Conv2d::new(&mut s, "conv1", c_in, c_out, 3, 1, 1, Dist::He { fan_in: 9 * c_in })?,
            n1: AffineNorm::new(&mut s, "norm1", c_out)?,
            c2: Conv2d::new(&mut s, "conv2", c_out, c_out, 3, 1, 1, Dist::He { fan_in: 9 * c_out })?,
            n2: AffineNorm::new(&mut s, "norm2", c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.n1.forward(&self.c1.forward(x)?)?.relu()?;
        Ok(self.n2.forward(&self.c2.forward(&h)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Segmentor {
    enc: Vec<DoubleConv>,
    ups: Vec<ConvTranspose2d>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
    pub n_classes: usize,
}

impl Segmentor {
    pub fn new(init: &mut Init, n_classes: usize, base_width: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("segmentor needs at least 2 classes"));
        }
        let widths: Vec<usize> = (0..DEPTH).map(|i| base_width << i).collect();
        let mut enc = Vec::with_capacity(DEPTH);
        let mut c_in = 1;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(DoubleConv::new(init, &format!("enc{i}"), c_in, w)?);
            c_in = w;
        }
        let mut ups = Vec::with_capacity(DEPTH - 1);
        let mut dec = Vec::with_capacity(DEPTH - 1);
        for i in (0..DEPTH - 1).rev() {
            let (hi, lo) = (widths[i + 1], widths[i]);
            ups.push(ConvTranspose2d::new(init, &format!("up{i}"), hi, lo, 2, 2, 0, 0, Dist::He { fan_in: 4 * hi })?);
            dec.push(DoubleConv::new(init, &format!("dec{i}"), 2 * lo, lo)?);
        }
        let head = Conv2d::new(init, "head", widths[0], n_classes, 1, 1, 0, Dist::He { fan_in: widths[0] })?;
        Ok(Self {
            enc,
            ups,
            dec,
            head,
            n_classes,
        })
    }

    /// Unnormalized class scores, `N × n × H × W`.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("segmentor expects 1 channel, got {c}")));
        }
        if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "segmentor input {h}x{w} must be a positive multiple of {SIZE_MULTIPLE}"
            )));
        }
        let mut skips = Vec::with_capacity(DEPTH);
        let mut x = image.clone();
        for (i, block) in self.enc.iter().enumerate() {
            if i > 0 {
                x = x.max_pool2d(2)?;
            }
            x = block.forward(&x)?;
            skips.push(x.clone());
        }
        skips.pop();
        for (up, block) in self.ups.iter().zip(&self.dec) {
            let skip = skips.pop().expect("one skip per decoder level");
            let u = up.forward(&x)?;
            x = block.forward(&Tensor::cat(&[&u, &skip], 1)?)?;
        }
        self.head.forward(&x)
    }

    /// Per-pixel class probabilities (softmax over channels).
    pub fn segment(&self, image: &Tensor) -> Result<Tensor> {
        softmax_channels(&self.logits(image)?)
    }
}

/// Hard labels from a probability (or logit) map: `N × H × W` of class ids.
pub fn argmax_labels(probs: &Tensor) -> Result<Vec<ndarray::Array2<u8>>> {
    let (n, _, h, w) = probs.dims4()?;
    let idx = probs.argmax(1)?.to_dtype(candle_core::DType::U32)?;
    let flat = idx.flatten_all()?.to_vec1::<u32>()?;
    Ok((0..n)
        .map(|i| {
            let plane = flat[i * h * w..(i + 1) * h * w].iter().map(|&v| v as u8).collect();
            ndarray::Array2::from_shape_vec((h, w), plane).expect("plane size")
        })
        .collect())
}
