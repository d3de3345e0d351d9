use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::autoencoder::FeatureExtractor;
use crate::eval::metrics::{dice_iou, fid, gdc, kid_with, KidParams, KidScore};
use crate::eval::posthoc::PosthocSegmentor;
use crate::types::LabelMap;

/// Distances to the target set and, when a segmentor and masks are given,
/// overlap of the segmentor's predictions with the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `source,target` or `harmonized,target`.
    pub pair: String,
    pub kid: KidScore,
    pub fid: f64,
    /// Indexed by class id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gdc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub n_source: usize,
    pub n_target: usize,
    pub n_harmonized: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn row(&self, pair: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.pair == pair)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One line per row; per-class scores are expanded into columns.
    pub fn to_csv(&self) -> String {
        let n = self
            .rows
            .iter()
            .filter_map(|r| r.dice.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0);
        let mut header = vec!["pair".to_string(), "kid_mean".into(), "kid_std".into(), "fid".into()];
        header.extend((0..n).map(|c| format!("dice_{c}")));
        header.extend((0..n).map(|c| format!("iou_{c}")));
        if n > 0 {
            header.push("gdc".into());
        }
        let mut out = header.join(",") + "\n";
        for r in &self.rows {
            let mut cells = vec![r.pair.replace(',', "->"), r.kid.mean.to_string(), r.kid.std.to_string(), r.fid.to_string()];
            if n > 0 {
                let opt = |v: Option<&Vec<f64>>, c: usize| v.and_then(|v| v.get(c)).map(|x| x.to_string()).unwrap_or_default();
                cells.extend((0..n).map(|c| opt(r.dice.as_ref(), c)));
                cells.extend((0..n).map(|c| opt(r.iou.as_ref(), c)));
                cells.push(r.gdc.map(|g| g.to_string()).unwrap_or_default());
            }
            out += &(cells.join(",") + "\n");
        }
        out
    }
}

/// Mean per-class Dice and IoU, and mean GDC, over paired masks.
pub fn segmentation_scores(preds: &[LabelMap], truths: &[LabelMap], n_classes: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "need equally many predictions and masks, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    let mut dice = vec![0.0; n_classes];
    let mut iou = vec![0.0; n_classes];
    let mut g = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        for c in 0..n_classes {
            let (d, i) = dice_iou(p, t, c as u8)?;
            dice[c] += d;
            iou[c] += i;
        }
        g += gdc(p, t)?;
    }
    let m = preds.len() as f64;
    Ok((dice.into_iter().map(|v| v / m).collect(), iou.into_iter().map(|v| v / m).collect(), g / m))
}

pub struct EvaluationInputs<'a> {
    pub source: &'a [&'a Array2<f32>],
    pub target: &'a [&'a Array2<f32>],
    /// Harmonized versions of `source`, in the same order.
    pub harmonized: &'a [&'a Array2<f32>],
    /// Ground truth for `source` (and therefore `harmonized`).
    pub truth_masks: Option<&'a [LabelMap]>,
}

pub fn evaluate_harmonization(
    extractor: &FeatureExtractor,
    inputs: &EvaluationInputs<'_>,
    segmentor_target: Option<&PosthocSegmentor>,
    kid_params: &KidParams,
) -> Result<EvaluationReport> {
    let fs = extractor.extract(inputs.source, "source")?;
    let ft = extractor.extract(inputs.target, "target")?;
    let fh = extractor.extract(inputs.harmonized, "harmonized")?;
    let mut warnings = Vec::new();

    let seg = match (segmentor_target, inputs.truth_masks) {
        (Some(s), Some(m)) => {
            if inputs.harmonized.len() != inputs.source.len() || m.len() != inputs.source.len() {
                return Err(Error::invalid(format!(
                    "segmentation scoring needs source, harmonized and masks of equal count, got {}, {} and {}",
                    inputs.source.len(),
                    inputs.harmonized.len(),
                    m.len()
                )));
            }
            Some((s, m))
        }
        (Some(_), None) => {
            warnings.push("source masks unavailable; segmentation scores omitted".to_string());
            None
        }
        (None, _) => {
            warnings.push("no target segmentor given; segmentation scores omitted".to_string());
            None
        }
    };
    for w in &warnings {
        log::warn!("{w}");
    }

    let mut rows = Vec::with_capacity(2);
    for (pair, feats, images) in [
        ("source,target", &fs, inputs.source),
        ("harmonized,target", &fh, inputs.harmonized),
    ] {
        let (dice, iou, g) = match seg {
            Some((s, truths)) => {
                let preds = s.predict_all(images)?;
                let (d, i, g) = segmentation_scores(&preds, truths, s.config.n_classes)?;
                (Some(d), Some(i), Some(g))
            }
            None => (None, None, None),
        };
        rows.push(ReportRow {
            pair: pair.to_string(),
            kid: kid_with(feats, &ft, kid_params)?,
            fid: fid(feats, &ft)?,
            dice,
            iou,
            gdc: g,
        });
    }
    Ok(EvaluationReport {
        rows,
        n_source: fs.len(),
        n_target: ft.len(),
        n_harmonized: fh.len(),
        feature_dim: ft.dim(),
        warnings,
    })
}
