//! Residual U-Net generator whose normalization layers are renormalized by
//! FiLM parameters predicted from a semantic embedding.
//!
//! ```text
//! stem   7x7 conv  1 -> w      (H)
//! down1  3x3/2     w -> 2w     (H/2)
//! down2  3x3/2    2w -> 4w     (H/4)
//! trunk  4 x SegRenormResBlock(4w)
//! up1    tconv    4w -> 2w  + down1
//! up2    tconv    2w -> w   + stem
//! out    7x7 conv  w -> 1, tanh
//! ```
//!
//! Every convolution except the output one is followed by a normalization
//! site, so the embedding conditions features at all three resolutions.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::layers::{Conv2d, ConvTranspose2d};
use crate::nets::norm::{channel_standardize, film_modulate, AffineNorm, Film};
use crate::params::{Dist, Init};

pub const TRUNK_BLOCKS: usize = 4;

/// What follows a convolution inside the generator.
#[derive(Debug, Clone)]
pub enum NormSite {
    /// Standardize, then FiLM from the embedding.
    Renorm(Film),
    /// Standardize, then a learned per-channel affine map (ablation).
    Plain(AffineNorm),
}

impl NormSite {
    fn new(init: &mut Init, name: &str, channels: usize, embed_dim: usize, renorm: bool) -> Result<Self> {
        if renorm {
            Ok(NormSite::Renorm(Film::new(init, name, embed_dim, channels)?))
        } else {
            Ok(NormSite::Plain(AffineNorm::new(init, name, channels)?))
        }
    }

    pub fn forward(&self, h: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
        match self {
            NormSite::Renorm(film) => {
                let emb = emb.ok_or_else(|| Error::shape("renormalized generator needs an embedding"))?;
                film_modulate(&channel_standardize(h)?, emb, film)
            }
            NormSite::Plain(norm) => norm.forward(h),
        }
    }

    pub fn film(&self) -> Option<&Film> {
        match self {
            NormSite::Renorm(f) => Some(f),
            NormSite::Plain(_) => None,
        }
    }
}

/// Two `{3x3 conv -> standardize -> modulate -> ReLU}` stages plus an
/// additive skip from the block input.
#[derive(Debug, Clone)]
pub struct SegRenormResBlock {
    pub conv1: Conv2d,
    pub norm1: NormSite,
    pub conv2: Conv2d,
    pub norm2: NormSite,
}

impl SegRenormResBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize, embed_dim: usize, renorm: bool) -> Result<Self> {
        let mut s = init.sub(name);
        let he = Dist::He { fan_in: channels * 9 };
        Ok(Self {
            conv1: Conv2d::new(&mut s, "conv1", channels, channels, 3, 1, 1, he)?,
            norm1: NormSite::new(&mut s, "norm1", channels, embed_dim, renorm)?,
            conv2: Conv2d::new(&mut s, "conv2", channels, channels, 3, 1, 1, he)?,
            norm2: NormSite::new(&mut s, "norm2", channels, embed_dim, renorm)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv1.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.channels() {
            return Err(Error::shape(format!("block expects {} channels, got {c}", self.channels())));
        }
        let h = self.norm1.forward(&self.conv1.forward(x)?, emb)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?, emb)?.relu()?;
        Ok((x + h)?)
    }
}

/// Forward pass of one segmentation-renormalized residual block.
pub fn seg_renorm_res_block(block: &SegRenormResBlock, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
    block.forward(x, Some(emb))
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub stem: Conv2d,
    pub stem_norm: NormSite,
    pub down1: Conv2d,
    pub down1_norm: NormSite,
    pub down2: Conv2d,
    pub down2_norm: NormSite,
    pub trunk: Vec<SegRenormResBlock>,
    pub up1: ConvTranspose2d,
    pub up1_norm: NormSite,
    pub up2: ConvTranspose2d,
    pub up2_norm: NormSite,
    pub out: Conv2d,
    pub embed_dim: usize,
    pub renorm: bool,
}

impl Generator {
    pub fn new(init: &mut Init, base_width: usize, embed_dim: usize, renorm_enabled: bool) -> Result<Self> {
        let w = base_width;
        let site = |init: &mut Init, name: &str, c: usize| NormSite::new(init, name, c, embed_dim, renorm_enabled);
        let stem = Conv2d::new(init, "stem", 1, w, 7, 1, 3, Dist::He { fan_in: 49 })?;
        let stem_norm = site(init, "stem_norm", w)?;
        let down1 = Conv2d::new(init, "down1", w, 2 * w, 3, 2, 1, Dist::He { fan_in: 9 * w })?;
        let down1_norm = site(init, "down1_norm", 2 * w)?;
        let down2 = Conv2d::new(init, "down2", 2 * w, 4 * w, 3, 2, 1, Dist::He { fan_in: 18 * w })?;
        let down2_norm = site(init, "down2_norm", 4 * w)?;
        let trunk = {
            let mut t = init.sub("trunk");
            (0..TRUNK_BLOCKS)
                .map(|i| SegRenormResBlock::new(&mut t, &i.to_string(), 4 * w, embed_dim, renorm_enabled))
                .collect::<Result<Vec<_>>>()?
        };
        let up1 = ConvTranspose2d::new(init, "up1", 4 * w, 2 * w, 3, 2, 1, 1, Dist::He { fan_in: 36 * w })?;
        let up1_norm = site(init, "up1_norm", 2 * w)?;
        let up2 = ConvTranspose2d::new(init, "up2", 2 * w, w, 3, 2, 1, 1, Dist::He { fan_in: 18 * w })?;
        let up2_norm = site(init, "up2_norm", w)?;
        let out = Conv2d::new(init, "out", w, 1, 7, 1, 3, Dist::He { fan_in: 49 * w })?;
        Ok(Self {
            stem,
            stem_norm,
            down1,
            down1_norm,
            down2,
            down2_norm,
            trunk,
            up1,
            up1_norm,
            up2,
            up2_norm,
            out,
            embed_dim,
            renorm: renorm_enabled,
        })
    }

    pub fn sites(&self) -> Vec<&NormSite> {
        let mut v = vec![&self.stem_norm, &self.down1_norm, &self.down2_norm];
        for b in &self.trunk {
            v.push(&b.norm1);
            v.push(&b.norm2);
        }
        v.push(&self.up1_norm);
        v.push(&self.up2_norm);
        v
    }

    /// Translates an `N × 1 × H × W` batch. `emb` is `N × E` and is ignored
    /// when renormalization is disabled.
    pub fn translate(&self, image: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
        let (n, c, h, w) = image.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("generator expects 1 channel, got {c}")));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("generator input {h}x{w} must be a multiple of 4")));
        }
        let emb = if self.renorm {
            let e = emb.ok_or_else(|| Error::shape("renormalized generator needs an embedding"))?;
            let (en, ed) = e.dims2()?;
            if ed != self.embed_dim || en != n {
                return Err(Error::shape(format!(
                    "embedding is {en}x{ed}, generator expects {n}x{}",
                    self.embed_dim
                )));
            }
            Some(e)
        } else {
            None
        };

        let s0 = self.stem_norm.forward(&self.stem.forward(image)?, emb)?.relu()?;
        let s1 = self.down1_norm.forward(&self.down1.forward(&s0)?, emb)?.relu()?;
        let mut h = self.down2_norm.forward(&self.down2.forward(&s1)?, emb)?.relu()?;
        for block in &self.trunk {
            h = block.forward(&h, emb)?;
        }
        let u1 = (self.up1.forward(&h)? + &s1)?;
        let u1 = self.up1_norm.forward(&u1, emb)?.relu()?;
        let u2 = (self.up2.forward(&u1)? + &s0)?;
        let u2 = self.up2_norm.forward(&u2, emb)?.relu()?;
        Ok(self.out.forward(&u2)?.tanh()?)
    }
}
