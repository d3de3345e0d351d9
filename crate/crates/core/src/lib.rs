//! Segmentation-renormalized cycle-consistent image translation for
//! harmonizing images across scanners, with the evaluation instruments used
//! to judge it.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod nets;
pub mod optim;
pub mod params;
pub mod trainer;
pub mod types;

pub use checkpoint::Checkpoint;
pub use config::{parse_config, LossWeights, Preset, TrainConfig};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use model::ModelBundle;
pub use types::{Domain, ImageSlice, LabelMap, Sample};
