//! Desk-scale harmonization experiment on synthetic phantoms: train the
//! translator, harmonize the held-out source slices and score them with an
//! independently trained feature extractor and target segmentor.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::phantom::{generate_phantoms, PhantomSpec};
use crate::data::Split;
use crate::error::Result;
use crate::eval::autoencoder::{train_feature_extractor, AutoencoderConfig, FeatureExtractor};
use crate::eval::metrics::{dice_iou, KidParams};
use crate::eval::posthoc::{train_segmentor, PosthocSegmentor, SegmentorConfig};
use crate::eval::report::{evaluate_harmonization, EvaluationInputs, EvaluationReport};
use crate::losses::LossBreakdown;
use crate::model::ModelBundle;
use crate::trainer::{harmonize_with_masks, train_with_progress, Direction, TrainState};
use crate::types::{Domain, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub phantoms: PhantomSpec,
    pub translator: TrainConfig,
    pub extractor: AutoencoderConfig,
    pub segmentor: SegmentorConfig,
    pub kid: KidParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantoms: PhantomSpec {
                n_samples: 250,
                test_fraction: 0.2,
                ..PhantomSpec::default()
            },
            translator: TrainConfig {
                crop_size: 48,
                iterations: Some(400),
                ..TrainConfig::default()
            },
            extractor: AutoencoderConfig {
                width: 8,
                constant_epochs: 5,
                decay_epochs: 15,
                ..AutoencoderConfig::default()
            },
            segmentor: SegmentorConfig::default(),
            kid: KidParams::default(),
        }
    }
}

pub struct ExperimentOutcome {
    pub bundle: ModelBundle,
    pub losses: Vec<LossBreakdown>,
    pub extractor: FeatureExtractor,
    pub segmentor: PosthocSegmentor,
    pub report: EvaluationReport,
    /// Held-out source slices and their harmonized versions.
    pub test_source: Vec<Sample>,
    pub test_target: Vec<Sample>,
    pub harmonized: Vec<Array2<f32>>,
    /// Mean foreground Dice between the input masks and the target
    /// segmentor's predictions on the harmonized slices (the harmonized
    /// row's class-1 Dice).
    pub anatomy_dice: f64,
}

impl ExperimentOutcome {
    /// Foreground (class 1) Dice of the target segmentor on source and on
    /// harmonized slices.
    pub fn foreground_dice(&self) -> (f64, f64) {
        let get = |pair: &str| {
            self.report
                .row(pair)
                .and_then(|r| r.dice.as_ref())
                .and_then(|d| d.get(1).copied())
                .unwrap_or(f64::NAN)
        };
        (get("source,target"), get("harmonized,target"))
    }

    pub fn kid_means(&self) -> (f64, f64) {
        let get = |pair: &str| self.report.row(pair).map(|r| r.kid.mean).unwrap_or(f64::NAN);
        (get("source,target"), get("harmonized,target"))
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, work_dir: &Path, mut log: impl FnMut(&str)) -> Result<ExperimentOutcome> {
    let (a, b) = generate_phantoms(&cfg.phantoms)?;
    let (train_x, train_y) = (a.samples(Some(Split::Train)), b.samples(Some(Split::Train)));
    let (test_x, test_y) = (a.samples(Some(Split::Test)), b.samples(Some(Split::Test)));
    log(&format!(
        "phantoms: {} train + {} test per domain",
        train_x.len(),
        test_x.len()
    ));

    let out = train_with_progress(&cfg.translator, &train_x, &train_y, work_dir, 0, |step, l| {
        if step % 25 == 0 || step == 1 {
            log(&format!("translator {}", l.csv_row(step)));
        }
    })?;
    let bundle = TrainState::from_checkpoint(&Checkpoint::load(&out.final_checkpoint)?)?.bundle;

    let slices: Vec<_> = test_x.iter().map(|s| s.image.clone()).collect();
    let harm = harmonize_with_masks(&bundle, &slices, Direction::Forward)?;
    let harmonized: Vec<Array2<f32>> = harm.into_iter().map(|h| h.image.data).collect();

    let mut ae_images: Vec<(&Array2<f32>, Domain)> = train_x.iter().map(|s| (&s.image.data, Domain::Source)).collect();
    ae_images.extend(train_y.iter().map(|s| (&s.image.data, Domain::Target)));
    let (extractor, _) = train_feature_extractor(&cfg.extractor, &ae_images, |e| {
        log(&format!("extractor epoch {} lr {:.2e} l1 {:.4} bce {:.4}", e.epoch, e.lr, e.l1, e.bce))
    })?;

    let (segmentor, _) = train_segmentor(&cfg.segmentor, &train_y, |e, l| log(&format!("segmentor epoch {e} loss {l:.4}")))?;

    let src: Vec<&Array2<f32>> = test_x.iter().map(|s| &s.image.data).collect();
    let tgt: Vec<&Array2<f32>> = test_y.iter().map(|s| &s.image.data).collect();
    let har: Vec<&Array2<f32>> = harmonized.iter().collect();
    let truth: Vec<_> = test_x.iter().map(|s| s.mask.clone()).collect();
    let report = evaluate_harmonization(
        &extractor,
        &EvaluationInputs {
            source: &src,
            target: &tgt,
            harmonized: &har,
            truth_masks: Some(&truth),
        },
        Some(&segmentor),
        &cfg.kid,
    )?;

    let preds = segmentor.predict_all(&tgt)?;
    let mut upper = 0.0;
    for (p, s) in preds.iter().zip(&test_y) {
        upper += dice_iou(p, &s.mask, 1)?.0;
    }
    log(&format!("target segmentor on target test: dice {:.4}", upper / preds.len().max(1) as f64));

    let mut outcome = ExperimentOutcome {
        bundle,
        losses: out.losses,
        extractor,
        segmentor,
        report,
        test_source: test_x,
        test_target: test_y,
        harmonized,
        anatomy_dice: 0.0,
    };
    outcome.anatomy_dice = outcome.foreground_dice().1;
    Ok(outcome)
}
