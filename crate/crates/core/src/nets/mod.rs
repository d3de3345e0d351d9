//! Subnetworks of the translator and their building blocks.

pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod norm;
pub mod segmentor;
pub mod semantic;
pub mod spectral;

pub use discriminator::{DiscMode, Discriminator};
pub use generator::{seg_renorm_res_block, Generator, NormSite, SegRenormResBlock};
pub use norm::{channel_standardize, film_modulate, AffineNorm, Film};
pub use segmentor::Segmentor;
pub use semantic::SemanticExtractor;
pub use spectral::spectral_normalize;
