//! Open-set selective classification metrics.
//!
//! Every ID and OOD test example is scored with its MaxProb confidence.
//! Predictions on OOD examples always count as incorrect. The
//! accuracy-coverage curve sorts by descending confidence (ties by id) and
//! reports prefix accuracy at every coverage `k/N`, `k = 1..N`; AUAC is the
//! mean of those prefix accuracies. AUROC is the Mann-Whitney probability
//! that an ID example outranks an OOD example, with ties worth one half.

pub mod sweep;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, ClassifierState};
use crate::corpus::{CorpusError, LabeledExample, OpenSetSplit};
use crate::featurize::featurize;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model classes {model:?} do not match split closed labels {split:?}")]
    LabelSpaceMismatch {
        model: Vec<String>,
        split: Vec<String>,
    },
    #[error("AUROC needs at least one ID and one OOD example (got {n_id} ID, {n_ood} OOD)")]
    MissingPopulation { n_id: usize, n_ood: usize },
    #[error("no scored examples")]
    Empty,
    #[error("quota {quota} is invalid for a novelty set of {available} items")]
    Quota { quota: usize, available: usize },
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error(transparent)]
    Train(#[from] ClassifierError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub confidence: f64,
    pub is_ood: bool,
    pub is_correct: bool,
}

impl ScoredExample {
    pub fn id_example(id: impl Into<String>, confidence: f64, is_correct: bool) -> Self {
        Self {
            id: id.into(),
            confidence,
            is_ood: false,
            is_correct,
        }
    }

    pub fn ood_example(id: impl Into<String>, confidence: f64) -> Self {
        Self {
            id: id.into(),
            confidence,
            is_ood: true,
            is_correct: false,
        }
    }
}

fn score_one(state: &ClassifierState, ex: &LabeledExample, is_ood: bool) -> ScoredExample {
    let p = state.predict(&featurize(&ex.text, &state.feature_config));
    ScoredExample {
        id: ex.id.clone(),
        confidence: p.confidence,
        is_ood,
        is_correct: !is_ood && p.predicted_label == ex.label,
    }
}

/// Scores `id_test` then `ood_test` with MaxProb.
pub fn score_test_set(
    state: &ClassifierState,
    split: &OpenSetSplit,
) -> Result<Vec<ScoredExample>, EvalError> {
    if state.class_labels != split.closed_labels {
        return Err(EvalError::LabelSpaceMismatch {
            model: state.class_labels.clone(),
            split: split.closed_labels.clone(),
        });
    }
    let mut out: Vec<ScoredExample> = split
        .id_test
        .iter()
        .map(|e| score_one(state, e, false))
        .collect();
    out.extend(split.ood_test.iter().map(|e| score_one(state, e, true)));
    Ok(out)
}

/// Descending confidence, ties broken by ascending id.
fn by_confidence_desc(a: &ScoredExample, b: &ScoredExample) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.id.cmp(&b.id))
}

pub fn sorted_by_confidence(scored: &[ScoredExample]) -> Vec<&ScoredExample> {
    let mut v: Vec<&ScoredExample> = scored.iter().collect();
    v.sort_by(|a, b| by_confidence_desc(a, b));
    v
}

/// Rank-based AUROC with ID as the positive class.
pub fn auroc(scored: &[ScoredExample]) -> Result<f64, EvalError> {
    let n_ood = scored.iter().filter(|s| s.is_ood).count();
    let n_id = scored.len() - n_ood;
    if n_id == 0 || n_ood == 0 {
        return Err(EvalError::MissingPopulation { n_id, n_ood });
    }
    let mut order: Vec<&ScoredExample> = scored.iter().collect();
    order.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));

    // Sum of 1-based mid-ranks of the ID examples.
    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].confidence == order[i].confidence {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let ids_in_group = order[i..j].iter().filter(|s| !s.is_ood).count();
        id_rank_sum += mid_rank * ids_in_group as f64;
        i = j;
    }
    let (n_id, n_ood) = (n_id as f64, n_ood as f64);
    let u = id_rank_sum - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub coverage: f64,
    pub accuracy: f64,
}

pub fn accuracy_coverage_curve(scored: &[ScoredExample]) -> Vec<CurvePoint> {
    let n = scored.len() as f64;
    let mut correct = 0usize;
    sorted_by_confidence(scored)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            correct += s.is_correct as usize;
            let k = (i + 1) as f64;
            CurvePoint {
                coverage: k / n,
                accuracy: correct as f64 / k,
            }
        })
        .collect()
}

/// Area under the accuracy-coverage step curve.
pub fn auac(scored: &[ScoredExample]) -> Result<f64, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    let curve = accuracy_coverage_curve(scored);
    Ok(curve.iter().map(|p| p.accuracy).sum::<f64>() / curve.len() as f64)
}

/// Accuracy over the ID examples only.
pub fn id_accuracy(scored: &[ScoredExample]) -> f64 {
    let (n, correct) = scored
        .iter()
        .filter(|s| !s.is_ood)
        .fold((0usize, 0usize), |(n, c), s| (n + 1, c + s.is_correct as usize));
    if n == 0 {
        0.0
    } else {
        correct as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub id: String,
    pub confidence: f64,
    pub is_ood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_id: usize,
    pub n_ood: usize,
    pub id_accuracy: f64,
    pub auac: f64,
    /// `None` when either population is empty.
    pub auroc: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub confidence_profile: Vec<ProfileRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_scored(
        scored: &[ScoredExample],
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, EvalError> {
        let n_ood = scored.iter().filter(|s| s.is_ood).count();
        let auroc = match auroc(scored) {
            Ok(v) => Some(v),
            Err(EvalError::MissingPopulation { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            n_id: scored.len() - n_ood,
            n_ood,
            id_accuracy: id_accuracy(scored),
            auac: auac(scored)?,
            auroc,
            curve: accuracy_coverage_curve(scored),
            confidence_profile: sorted_by_confidence(scored)
                .into_iter()
                .map(|s| ProfileRecord {
                    id: s.id.clone(),
                    confidence: s.confidence,
                    is_ood: s.is_ood,
                })
                .collect(),
            metadata,
        })
    }

    /// Checks range and monotonicity invariants.
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} = {v} outside [0, 1]"))
            }
        };
        unit("auac", self.auac)?;
        unit("id_accuracy", self.id_accuracy)?;
        if let Some(a) = self.auroc {
            unit("auroc", a)?;
        }
        if self.curve.len() != self.n_id + self.n_ood {
            return Err("curve length differs from example count".into());
        }
        if self.curve.windows(2).any(|w| w[1].coverage <= w[0].coverage) {
            return Err("curve coverage not strictly increasing".into());
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Scores a split and builds the full report.
pub fn evaluate(
    state: &ClassifierState,
    split: &OpenSetSplit,
    metadata: BTreeMap<String, String>,
) -> Result<EvalReport, EvalError> {
    let scored = score_test_set(state, split)?;
    EvalReport::from_scored(&scored, metadata)
}

/// Formats `v` with nine significant digits in positional notation.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["coverage", "accuracy"])?;
    for p in curve {
        w.write_record([format_sig9(p.coverage), format_sig9(p.accuracy)])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV of `id,confidence,is_ood,is_correct`, highest confidence first.
pub fn export_confidence_profile(scored: &[ScoredExample], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "confidence", "is_ood", "is_correct"])?;
    for s in sorted_by_confidence(scored) {
        w.write_record([
            s.id.clone(),
            format_sig9(s.confidence),
            s.is_ood.to_string(),
            s.is_correct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
