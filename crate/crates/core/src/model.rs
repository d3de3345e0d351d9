//! The full set of translator subnetworks.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nets::{Discriminator, Generator, Segmentor, SemanticExtractor};
use crate::params::{Init, ParamStore};
use crate::types::Domain;

pub const SEG_PREFIXES: [&str; 2] = ["S.", "Q."];
pub const GEN_PREFIXES: [&str; 4] = ["G.", "F.", "ES.", "EQ."];
pub const DISC_PREFIXES: [&str; 2] = ["DX.", "DY."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleShape {
    pub n_classes: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub renorm: bool,
}

impl BundleShape {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            n_classes: cfg.n_classes,
            base_width: cfg.base_width,
            embed_dim: cfg.embed_dim,
            renorm: cfg.ablation_renorm,
        }
    }
}

/// `G: X → Y`, `F: Y → X`, segmentors `S` (on X-looking images) and `Q` (on
/// Y-looking images), their semantic extractors, and the two discriminators.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub store: ParamStore,
    pub g: Generator,
    pub f: Generator,
    pub s: Segmentor,
    pub q: Segmentor,
    pub e_s: SemanticExtractor,
    pub e_q: SemanticExtractor,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub shape: BundleShape,
}

/// Output of a conditioned translation.
#[derive(Debug, Clone)]
pub struct Translation {
    /// Segmentation of the input, `N × n × H × W` probabilities.
    pub mask_probs: Tensor,
    pub embedding: Tensor,
    pub output: Tensor,
}

impl ModelBundle {
    pub fn new(shape: BundleShape, dtype: DType, seed: u64) -> Result<Self> {
        if shape.n_classes < 2 || shape.base_width == 0 || shape.embed_dim == 0 {
            return Err(Error::invalid(format!("invalid bundle shape {shape:?}")));
        }
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut root = Init::new(&mut store, &mut rng, "");
        let w = shape.base_width;
        let g = Generator::new(&mut root.sub("G"), w, shape.embed_dim, shape.renorm)?;
        let f = Generator::new(&mut root.sub("F"), w, shape.embed_dim, shape.renorm)?;
        let s = Segmentor::new(&mut root.sub("S"), shape.n_classes, w)?;
        let q = Segmentor::new(&mut root.sub("Q"), shape.n_classes, w)?;
        let e_s = SemanticExtractor::new(&mut root.sub("ES"), shape.n_classes, shape.embed_dim)?;
        let e_q = SemanticExtractor::new(&mut root.sub("EQ"), shape.n_classes, shape.embed_dim)?;
        let d_x = Discriminator::new(&mut root.sub("DX"), w)?;
        let d_y = Discriminator::new(&mut root.sub("DY"), w)?;
        Ok(Self {
            store,
            g,
            f,
            s,
            q,
            e_s,
            e_q,
            d_x,
            d_y,
            shape,
        })
    }

    pub fn from_config(cfg: &TrainConfig, dtype: DType) -> Result<Self> {
        Self::new(BundleShape::from_config(cfg), dtype, cfg.seed)
    }

    /// Generator taking images *from* `domain` to the other one.
    pub fn generator(&self, from: Domain) -> &Generator {
        match from {
            Domain::Source => &self.g,
            Domain::Target => &self.f,
        }
    }

    /// Segmentor and extractor that read images looking like `domain`.
    pub fn conditioner(&self, domain: Domain) -> (&Segmentor, &SemanticExtractor) {
        match domain {
            Domain::Source => (&self.s, &self.e_s),
            Domain::Target => (&self.q, &self.e_q),
        }
    }

    pub fn discriminator(&self, domain: Domain) -> &Discriminator {
        match domain {
            Domain::Source => &self.d_x,
            Domain::Target => &self.d_y,
        }
    }

    /// Embedding from an already computed segmentation. With `detach` no
    /// gradient reaches the segmentor through the embedding.
    pub fn embed(&self, domain: Domain, mask_probs: &Tensor, detach: bool) -> Result<Tensor> {
        let (_, extractor) = self.conditioner(domain);
        if detach {
            extractor.extract(&mask_probs.detach())
        } else {
            extractor.extract(mask_probs)
        }
    }

    /// Segment, embed and translate `image` (which looks like `from`).
    pub fn translate(&self, from: Domain, image: &Tensor, detach_embedding: bool) -> Result<Translation> {
        let (segmentor, _) = self.conditioner(from);
        let mask_probs = segmentor.segment(image)?;
        self.translate_with_mask(from, image, mask_probs, detach_embedding)
    }

    pub fn translate_with_mask(&self, from: Domain, image: &Tensor, mask_probs: Tensor, detach_embedding: bool) -> Result<Translation> {
        let embedding = self.embed(from, &mask_probs, detach_embedding)?;
        let emb = self.shape.renorm.then_some(&embedding);
        let output = self.generator(from).translate(image, emb)?;
        Ok(Translation {
            mask_probs,
            embedding,
            output,
        })
    }
}
