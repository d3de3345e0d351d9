pub mod autoencoder;
pub mod metrics;
pub mod posthoc;
pub mod report;
pub mod sensitivity;

pub use autoencoder::{train_feature_extractor, AutoencoderConfig, FeatureExtractor};
pub use metrics::{dice_iou, fid, gdc, kid, ssim, FeatureSet, KidParams, KidScore};
pub use posthoc::{train_segmentor, PosthocSegmentor, SegmentorConfig};
pub use report::{evaluate_harmonization, EvaluationInputs, EvaluationReport};
pub use sensitivity::{sensitivity_curve, SensitivityReport};
