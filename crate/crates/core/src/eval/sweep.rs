//! Train-and-evaluate sweeps: noise mixtures, generation quota, novel-set
//! size and training-set size.
//!
//! Every cell of a sweep is an independent, seed-deterministic training run,
//! so cells are evaluated in parallel and reassembled in a fixed order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, format_sig9, EvalError, EvalReport};
use crate::classifier::{train, LossKind, TrainConfig};
use crate::corpus::{build_noise_mixture, LabeledExample, NoveltySource, OpenSetSplit};
use crate::featurize::FeatureConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Noise,
    Quota,
    NovelsetSize,
    TrainsetSize,
}

impl SweepKind {
    /// Column name of the swept quantity.
    pub fn setting_name(self) -> &'static str {
        match self {
            SweepKind::Noise => "id_fraction",
            SweepKind::Quota => "quota",
            SweepKind::NovelsetSize => "novelset_size",
            SweepKind::TrainsetSize => "trainset_size",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Noise => "noise",
            SweepKind::Quota => "quota",
            SweepKind::NovelsetSize => "novelset-size",
            SweepKind::TrainsetSize => "trainset-size",
        })
    }
}

impl FromStr for SweepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "noise" => Ok(SweepKind::Noise),
            "quota" => Ok(SweepKind::Quota),
            "novelset-size" => Ok(SweepKind::NovelsetSize),
            "trainset-size" => Ok(SweepKind::TrainsetSize),
            other => Err(format!("unknown sweep kind {other:?}")),
        }
    }
}

/// One result row. `seed` is `None` for rows averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: LossKind,
    pub setting: f64,
    pub seed: Option<u64>,
    pub auac: f64,
    pub auroc: Option<f64>,
    pub id_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn per_seed(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.seed.is_some())
    }

    pub fn means(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.seed.is_none())
    }

    pub fn mean(&self, loss: LossKind, setting: f64) -> Option<&SweepRow> {
        self.means()
            .find(|r| r.loss == loss && r.setting == setting)
    }

    /// CSV with one row per (loss, setting, seed) followed by the mean rows.
    pub fn write_csv(&self, path: &Path, fingerprint: &str) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "loss",
            self.kind.setting_name(),
            "seed",
            "auac",
            "auroc",
            "id_accuracy",
            "fingerprint",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.loss.to_string(),
                format!("{}", r.setting),
                r.seed.map_or("mean".to_string(), |s| s.to_string()),
                format_sig9(r.auac),
                r.auroc.map_or(String::new(), format_sig9),
                format_sig9(r.id_accuracy),
                fingerprint.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn row(loss: LossKind, setting: f64, seed: u64, report: &EvalReport) -> SweepRow {
    SweepRow {
        loss,
        setting,
        seed: Some(seed),
        auac: report.auac,
        auroc: report.auroc,
        id_accuracy: report.id_accuracy,
    }
}

/// Appends one mean row per (loss, setting), in first-appearance order.
fn with_means(kind: SweepKind, rows: Vec<SweepRow>) -> SweepTable {
    let mut order: Vec<(LossKind, f64)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&SweepRow>> = BTreeMap::new();
    for r in &rows {
        let key = match order.iter().position(|&(l, s)| l == r.loss && s == r.setting) {
            Some(i) => i,
            None => {
                order.push((r.loss, r.setting));
                order.len() - 1
            }
        };
        groups.entry(key).or_default().push(r);
    }
    let means: Vec<SweepRow> = groups
        .into_iter()
        .map(|(key, g)| {
            let n = g.len() as f64;
            let auroc = if g.iter().all(|r| r.auroc.is_some()) {
                Some(g.iter().map(|r| r.auroc.unwrap_or(0.0)).sum::<f64>() / n)
            } else {
                None
            };
            SweepRow {
                loss: order[key].0,
                setting: order[key].1,
                seed: None,
                auac: g.iter().map(|r| r.auac).sum::<f64>() / n,
                auroc,
                id_accuracy: g.iter().map(|r| r.id_accuracy).sum::<f64>() / n,
            }
        })
        .collect();
    let mut rows = rows;
    rows.extend(means);
    SweepTable { kind, rows }
}

pub fn train_and_evaluate(
    split: &OpenSetSplit,
    novelty: Option<&NoveltySource>,
    config: &TrainConfig,
    features: &FeatureConfig,
) -> Result<EvalReport, EvalError> {
    let out = train(split, novelty, config, features)?;
    evaluate(&out.state, split, BTreeMap::new())
}

/// Pools that a noise mixture draws from.
#[derive(Debug, Clone, Copy)]
pub struct MixturePools<'a> {
    /// Novel-class examples, e.g. held-out gold data.
    pub ood: &'a [LabeledExample],
    /// Closed-set examples used as noise.
    pub id: &'a [LabeledExample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub id_fractions: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
    pub novelty_size: usize,
}

/// Trains on mixtures of novel-class data and closed-set noise.
///
/// For each seed, the mixture and the training batches are both drawn with
/// that seed, so fraction 0.0 is the gold-data setting.
pub fn run_noise_mixture(
    split: &OpenSetSplit,
    pools: MixturePools<'_>,
    sweep: &NoiseSweep,
    base: &TrainConfig,
    features: &FeatureConfig,
) -> Result<SweepTable, EvalError> {
    if sweep.seeds.is_empty() || sweep.id_fractions.is_empty() || sweep.losses.is_empty() {
        return Err(EvalError::Sweep("empty fractions, losses or seeds".into()));
    }
    if let Some(l) = sweep.losses.iter().find(|l| !l.needs_novelty()) {
        return Err(EvalError::Sweep(format!("loss {l} does not use a novel set")));
    }
    let mut cells = Vec::new();
    for &loss in &sweep.losses {
        for &fraction in &sweep.id_fractions {
            for &seed in &sweep.seeds {
                cells.push((loss, fraction, seed));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(loss, fraction, seed)| {
            let mixture =
                build_noise_mixture(pools.ood, pools.id, fraction, sweep.novelty_size, seed)?;
            let cfg = TrainConfig {
                loss,
                seed,
                ..base.clone()
            };
            let report = train_and_evaluate(split, Some(&mixture), &cfg, features)?;
            Ok(row(loss, fraction, seed, &report))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(with_means(SweepKind::Noise, rows))
}

fn sorted_unique(values: &[usize]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Trains on the first `quota` novelty items for each quota, ascending.
pub fn run_quota_sweep(
    split: &OpenSetSplit,
    novelty: &NoveltySource,
    quotas: &[usize],
    seeds: &[u64],
    base: &TrainConfig,
    features: &FeatureConfig,
) -> Result<SweepTable, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::Sweep("no seeds".into()));
    }
    let quotas = sorted_unique(quotas);
    if let Some(&q) = quotas.iter().find(|&&q| q == 0 || q > novelty.len()) {
        return Err(EvalError::Quota {
            quota: q,
            available: novelty.len(),
        });
    }
    let cells: Vec<(usize, u64)> = quotas
        .iter()
        .flat_map(|&q| seeds.iter().map(move |&s| (q, s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(quota, seed)| {
            let cfg = TrainConfig {
                seed,
                ..base.clone()
            };
            let report = train_and_evaluate(split, Some(&novelty.prefix(quota)), &cfg, features)?;
            Ok(row(cfg.loss, quota as f64, seed, &report))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(with_means(SweepKind::Quota, rows))
}

/// Varies how many novelty items each loss sees. Size 0 trains vanilla.
pub fn run_novelset_size_sweep(
    split: &OpenSetSplit,
    novelty: &NoveltySource,
    sizes: &[usize],
    losses: &[LossKind],
    seeds: &[u64],
    base: &TrainConfig,
    features: &FeatureConfig,
) -> Result<SweepTable, EvalError> {
    if seeds.is_empty() || losses.is_empty() {
        return Err(EvalError::Sweep("no seeds or losses".into()));
    }
    if let Some(l) = losses.iter().find(|l| !l.needs_novelty()) {
        return Err(EvalError::Sweep(format!("loss {l} does not use a novel set")));
    }
    let sizes = sorted_unique(sizes);
    if let Some(&s) = sizes.iter().find(|&&s| s > novelty.len()) {
        return Err(EvalError::Quota {
            quota: s,
            available: novelty.len(),
        });
    }
    let mut cells = Vec::new();
    for &loss in losses {
        for &size in &sizes {
            for &seed in seeds {
                cells.push((loss, size, seed));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(loss, size, seed)| {
            let report = if size == 0 {
                let cfg = TrainConfig {
                    loss: LossKind::Vanilla,
                    seed,
                    ..base.clone()
                };
                train_and_evaluate(split, None, &cfg, features)?
            } else {
                let cfg = TrainConfig {
                    loss,
                    seed,
                    ..base.clone()
                };
                train_and_evaluate(split, Some(&novelty.prefix(size)), &cfg, features)?
            };
            Ok(row(loss, size as f64, seed, &report))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(with_means(SweepKind::NovelsetSize, rows))
}

/// Subsamples the training set to each size and trains every loss on it.
pub fn run_trainset_size_sweep(
    split: &OpenSetSplit,
    novelty: Option<&NoveltySource>,
    sizes: &[usize],
    losses: &[LossKind],
    seeds: &[u64],
    base: &TrainConfig,
    features: &FeatureConfig,
) -> Result<SweepTable, EvalError> {
    if seeds.is_empty() || losses.is_empty() {
        return Err(EvalError::Sweep("no seeds or losses".into()));
    }
    if novelty.is_none() && losses.iter().any(|l| l.needs_novelty()) {
        return Err(EvalError::Sweep("ccl/oe rows need a novel set".into()));
    }
    let sizes = sorted_unique(sizes);
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > split.train.len()) {
        return Err(EvalError::Sweep(format!(
            "training size {s} outside 1..={}",
            split.train.len()
        )));
    }
    let mut cells = Vec::new();
    for &loss in losses {
        for &size in &sizes {
            for &seed in seeds {
                cells.push((loss, size, seed));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(loss, size, seed)| {
            let sub = split.subsample_train(size, seed);
            let cfg = TrainConfig {
                loss,
                seed,
                ..base.clone()
            };
            let nov = if loss.needs_novelty() { novelty } else { None };
            let report = train_and_evaluate(&sub, nov, &cfg, features)?;
            Ok(row(loss, size as f64, seed, &report))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(with_means(SweepKind::TrainsetSize, rows))
}
