//! Training configuration and its flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! preset = msseg
//! iterations = 2000
//! lambda_cyc = 10
//! class_weights = 0.2, 0.8
//! ```
//!
//! A preset is applied first; every other key overrides it regardless of
//! the order in which it appears in the file.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the terms of the full objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_cyc: f64,
    pub lambda_seg: f64,
    /// Per-class cross-entropy weights, background first. Sums to one.
    pub class_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gan: 1.0,
            lambda_cyc: 10.0,
            lambda_seg: 1.0,
            class_weights: vec![0.5, 0.5],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        for (name, v) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_seg", self.lambda_seg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.class_weights.len() != n_classes {
            return Err(Error::invalid(format!(
                "class_weights has {} entries but n_classes = {n_classes}",
                self.class_weights.len()
            )));
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("class weights must be finite and >= 0"));
        }
        let sum: f64 = self.class_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("class weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Named regimes for the three evaluated datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Ixi,
    Retouch,
    Msseg,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Ixi => "ixi",
            Preset::Retouch => "retouch",
            Preset::Msseg => "msseg",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ixi" => Some(Preset::Ixi),
            "retouch" => Some(Preset::Retouch),
            "msseg" => Some(Preset::Msseg),
            _ => None,
        }
    }

    fn apply(self, cfg: &mut TrainConfig) {
        let (weights, crop, batch) = match self {
            Preset::Ixi => ([0.5, 0.5], 128, 4),
            Preset::Retouch => ([0.3, 0.7], 256, 2),
            Preset::Msseg => ([0.2, 0.8], 256, 2),
        };
        cfg.loss_weights.class_weights = weights.to_vec();
        cfg.crop_size = crop;
        cfg.batch_size = batch;
        cfg.preset = Some(self);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Option<Preset>,
    pub lr_seg: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    /// No default exists for the translation networks; `train` refuses to run
    /// until it is set.
    pub iterations: Option<u64>,
    pub seed: u64,
    pub ablation_renorm: bool,
    pub ablation_segloss: bool,
    pub loss_weights: LossWeights,
    pub n_classes: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub detach_embedding: bool,
    pub detach_translated_for_seg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: None,
            lr_seg: 2e-4,
            lr_gen: 2e-4,
            lr_disc: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            crop_size: 64,
            iterations: None,
            seed: 0,
            ablation_renorm: true,
            ablation_segloss: true,
            loss_weights: LossWeights::default(),
            n_classes: 2,
            base_width: 32,
            embed_dim: 128,
            detach_embedding: false,
            detach_translated_for_seg: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_seg", self.lr_seg),
            ("lr_gen", self.lr_gen),
            ("lr_disc", self.lr_disc),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            return Err(Error::invalid(format!(
                "crop_size must be a positive multiple of 4, got {}",
                self.crop_size
            )));
        }
        if !(2..=256).contains(&self.n_classes) {
            return Err(Error::invalid(format!("n_classes must be in [2, 256], got {}", self.n_classes)));
        }
        if self.base_width == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("base_width and embed_dim must be >= 1"));
        }
        self.loss_weights.validate(self.n_classes)
    }

    /// Loss-weight multiplier actually applied to the segmentation term.
    pub fn effective_lambda_seg(&self) -> f64 {
        if self.ablation_segloss {
            self.loss_weights.lambda_seg
        } else {
            0.0
        }
    }

    /// Renders the config back into the text format. `parse_config` of the
    /// result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        if let Some(p) = self.preset {
            line("preset", p.name().to_string());
        }
        line("lr_seg", self.lr_seg.to_string());
        line("lr_gen", self.lr_gen.to_string());
        line("lr_disc", self.lr_disc.to_string());
        line("adam_beta1", self.adam_beta1.to_string());
        line("adam_beta2", self.adam_beta2.to_string());
        line("batch_size", self.batch_size.to_string());
        line("crop_size", self.crop_size.to_string());
        if let Some(it) = self.iterations {
            line("iterations", it.to_string());
        }
        line("seed", self.seed.to_string());
        line("ablation_renorm", self.ablation_renorm.to_string());
        line("ablation_segloss", self.ablation_segloss.to_string());
        line("lambda_gan", self.loss_weights.lambda_gan.to_string());
        line("lambda_cyc", self.loss_weights.lambda_cyc.to_string());
        line("lambda_seg", self.loss_weights.lambda_seg.to_string());
        line(
            "class_weights",
            self.loss_weights
                .class_weights
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(", "),
        );
        line("n_classes", self.n_classes.to_string());
        line("base_width", self.base_width.to_string());
        line("embed_dim", self.embed_dim.to_string());
        line("detach_embedding", self.detach_embedding.to_string());
        line("detach_translated_for_seg", self.detach_translated_for_seg.to_string());
        out
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

const KEYS: &[&str] = &[
    "preset",
    "lr_seg",
    "lr_gen",
    "lr_disc",
    "adam_beta1",
    "adam_beta2",
    "batch_size",
    "crop_size",
    "iterations",
    "seed",
    "ablation_renorm",
    "ablation_segloss",
    "lambda_gan",
    "lambda_cyc",
    "lambda_seg",
    "class_weights",
    "n_classes",
    "base_width",
    "embed_dim",
    "detach_embedding",
    "detach_translated_for_seg",
];

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| err(line, format!("`{key}` expects a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(err(line, format!("`{key}` must be finite")));
    }
    Ok(x)
}

fn parse_weight(line: usize, key: &str, v: &str) -> Result<f64> {
    let x = parse_f64(line, key, v)?;
    if x < 0.0 {
        return Err(err(line, format!("`{key}` must be >= 0, got {x}")));
    }
    Ok(x)
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| err(line, format!("`{key}` expects a non-negative integer, got `{v}`")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(err(line, format!("`{key}` expects true/false, got `{v}`"))),
    }
}

/// Parses the `key = value` config text. Omitted keys take their defaults;
/// unknown or repeated keys, negative weights and crop sizes that are not a
/// multiple of 4 are rejected.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected `key = value`, got `{content}`")))?;
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) {
            return Err(err(line_no, format!("unknown key `{key}`")));
        }
        if value.is_empty() {
            return Err(err(line_no, format!("missing value for `{key}`")));
        }
        if let Some((prev, _)) = entries.insert(key, (line_no, value)) {
            return Err(err(line_no, format!("duplicate key `{key}` (first set on line {prev})")));
        }
    }

    let mut cfg = TrainConfig::default();
    if let Some(&(line, v)) = entries.get("preset") {
        let preset = Preset::parse(v)
            .ok_or_else(|| err(line, format!("unknown preset `{v}` (expected ixi, retouch or msseg)")))?;
        preset.apply(&mut cfg);
    }

    let mut class_weights_line = 0;
    for (&key, &(line, v)) in &entries {
        match key {
            "preset" => {}
            "lr_seg" => cfg.lr_seg = parse_f64(line, key, v)?,
            "lr_gen" => cfg.lr_gen = parse_f64(line, key, v)?,
            "lr_disc" => cfg.lr_disc = parse_f64(line, key, v)?,
            "adam_beta1" => cfg.adam_beta1 = parse_f64(line, key, v)?,
            "adam_beta2" => cfg.adam_beta2 = parse_f64(line, key, v)?,
            "batch_size" => cfg.batch_size = parse_usize(line, key, v)?,
            "crop_size" => {
                let c = parse_usize(line, key, v)?;
                if c == 0 || c % 4 != 0 {
                    return Err(err(line, format!("crop_size must be a positive multiple of 4, got {c}")));
                }
                cfg.crop_size = c;
            }
            "iterations" => {
                cfg.iterations = Some(
                    v.parse()
                        .map_err(|_| err(line, format!("`iterations` expects an integer, got `{v}`")))?,
                )
            }
            "seed" => {
                cfg.seed = v
                    .parse()
                    .map_err(|_| err(line, format!("`seed` expects an unsigned integer, got `{v}`")))?
            }
            "ablation_renorm" => cfg.ablation_renorm = parse_bool(line, key, v)?,
            "ablation_segloss" => cfg.ablation_segloss = parse_bool(line, key, v)?,
            "lambda_gan" => cfg.loss_weights.lambda_gan = parse_weight(line, key, v)?,
            "lambda_cyc" => cfg.loss_weights.lambda_cyc = parse_weight(line, key, v)?,
            "lambda_seg" => cfg.loss_weights.lambda_seg = parse_weight(line, key, v)?,
            "class_weights" => {
                class_weights_line = line;
                cfg.loss_weights.class_weights = v
                    .split(',')
                    .map(|w| parse_weight(line, key, w.trim()))
                    .collect::<Result<_>>()?;
            }
            "n_classes" => cfg.n_classes = parse_usize(line, key, v)?,
            "base_width" => cfg.base_width = parse_usize(line, key, v)?,
            "embed_dim" => cfg.embed_dim = parse_usize(line, key, v)?,
            "detach_embedding" => cfg.detach_embedding = parse_bool(line, key, v)?,
            "detach_translated_for_seg" => cfg.detach_translated_for_seg = parse_bool(line, key, v)?,
            _ => unreachable!("key list and match arms disagree"),
        }
    }

    // More classes than the preset covers and no explicit weights: uniform.
    if class_weights_line == 0 && cfg.loss_weights.class_weights.len() != cfg.n_classes && cfg.n_classes > 0 {
        cfg.loss_weights.class_weights = vec![1.0 / cfg.n_classes as f64; cfg.n_classes];
    }

    cfg.validate().map_err(|e| match e {
        Error::Invalid(message) => err(class_weights_line, message),
        other => other,
    })?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.loss_weights.lambda_gan, 1.0);
        assert_eq!(cfg.loss_weights.lambda_cyc, 10.0);
        assert_eq!(cfg.loss_weights.lambda_seg, 1.0);
        assert_eq!(cfg.lr_disc, 1e-4);
        assert_eq!(cfg.lr_gen, 2e-4);
        assert_eq!(cfg.lr_seg, 2e-4);
        assert_eq!(cfg.adam_beta1, 0.5);
        assert_eq!(cfg.adam_beta2, 0.999);
        assert!(cfg.ablation_renorm && cfg.ablation_segloss);
        assert_eq!(cfg.iterations, None);
    }

    #[test]
    fn presets() {
        let ms = parse_config("preset = msseg").unwrap();
        assert_eq!(ms.loss_weights.class_weights, vec![0.2, 0.8]);
        let rt = parse_config("preset = retouch\n").unwrap();
        assert_eq!(rt.loss_weights.class_weights, vec![0.3, 0.7]);
        assert_eq!(rt.crop_size, 256);
        assert_eq!(rt.batch_size, 2);
        let ixi = parse_config("preset=ixi").unwrap();
        assert_eq!(ixi.loss_weights.class_weights, vec![0.5, 0.5]);
        assert_eq!(ixi.crop_size, 128);
        assert_eq!(ixi.batch_size, 4);
    }

    #[test]
    fn explicit_keys_override_preset_in_any_order() {
        let cfg = parse_config("crop_size = 64\npreset = msseg # lesions\n").unwrap();
        assert_eq!(cfg.crop_size, 64);
        assert_eq!(cfg.loss_weights.class_weights, vec![0.2, 0.8]);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "unknown_key = 3",
            "lambda_cyc = -1",
            "crop_size = 30",
            "crop_size = 0",
            "preset = brats",
            "lr_gen = 0",
            "lambda_gan",
            "seed = 1\nseed = 2",
            "class_weights = 0.5, 0.6",
            "class_weights = 1.0",
            "ablation_renorm = maybe",
            "lr_seg = nan",
            "n_classes = 1",
        ] {
            assert!(parse_config(bad).is_err(), "accepted `{bad}`");
        }
    }

    #[test]
    fn error_reports_line() {
        match parse_config("# header\n\nfoo = 1\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn more_classes_default_to_uniform_weights() {
        let cfg = parse_config("n_classes = 4").unwrap();
        assert_eq!(cfg.loss_weights.class_weights, vec![0.25; 4]);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = parse_config("preset = retouch\niterations = 7\nseed = 9\ndetach_embedding = true").unwrap();
        cfg.loss_weights.lambda_cyc = 3.5;
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }
}
