use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::params::{Dist, Init};

/// Uses a parameter either as a graph leaf (gradients flow into it) or as a
/// constant.
pub(crate) fn use_param(v: &Var, track: bool) -> Tensor {
    if track {
        v.as_tensor().clone()
    } else {
        v.as_tensor().detach()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, dist: Dist) -> Result<Self> {
        let mut s = init.sub(name);
        let weight = s.param("weight", &[c_out, c_in, kernel, kernel], dist)?;
        let bias = Some(s.param("bias", &[c_out], Dist::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[3]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_with(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()), self.stride, self.padding)
    }
}

pub(crate) fn conv2d_with(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, c_in, h, w) = x.dims4()?;
    let (_, wc_in, k, _) = weight.dims4()?;
    if c_in != wc_in {
        return Err(Error::shape(format!("conv expects {wc_in} input channels, got {c_in}")));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(format!(
            "input {h}x{w} too small for a {k}x{k} convolution with padding {padding}"
        )));
    }
    let y = x.conv2d(weight, padding, stride, 1, 1)?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
        None => Ok(y),
    }
}

/// Transposed convolution; with kernel 3, stride 2, padding 1 and output
/// padding 1 it exactly doubles the spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, output_padding: usize, dist: Dist) -> Result<Self> {
        let mut s = init.sub(name);
        let weight = s.param("weight", &[c_in, c_out, kernel, kernel], dist)?;
        let bias = s.param("bias", &[c_out], Dist::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_in = x.dim(1)?;
        if c_in != self.weight.dims()[0] {
            return Err(Error::shape(format!(
                "transposed conv expects {} input channels, got {c_in}",
                self.weight.dims()[0]
            )));
        }
        let y = x.conv_transpose2d(self.weight.as_tensor(), self.padding, self.output_padding, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `out × in`
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, weight: Dist, bias: Dist) -> Result<Self> {
        let mut s = init.sub(name);
        let weight = s.param("weight", &[d_out, d_in], weight)?;
        let bias = s.param("bias", &[d_out], bias)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// `x` is `N × in`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        if d != self.in_dim() {
            return Err(Error::shape(format!("linear layer expects {} features, got {d}", self.in_dim())));
        }
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Softmax over the channel axis of an `N × C × H × W` tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Spatial mean of an `N × C × H × W` tensor, giving `N × C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
