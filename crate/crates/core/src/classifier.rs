//! Softmax linear classifier over hashed features.
//!
//! Four training objectives share one forward pass:
//!
//! - `vanilla`: mean cross-entropy on the closed-set batch.
//! - `ccl`: cross-entropy plus `lambda` times the mean, over all ID x OOD
//!   pairs in the batch, of `max(0, c(x_ood) - c(x_id))` where `c` is the
//!   maximum softmax probability.
//! - `oe`: cross-entropy plus `oe_weight` times the mean cross-entropy from
//!   the uniform distribution to the prediction on each novel example.
//! - `label_smoothing`: cross-entropy against `(1 - alpha) * onehot + alpha / K`.
//!
//! Gradients are derived by hand. The MaxProb term is differentiated with the
//! argmax class held fixed, and a hinge pair with `c(x_ood) <= c(x_id)`
//! contributes nothing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{NoveltySource, OpenSetSplit};
use crate::featurize::{featurize, FeatureConfig, FeatureError, SparseVector};
use crate::seeded_rng;

pub const MODEL_FORMAT: &str = "conal-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("label {0:?} is not one of the closed-set classes")]
    UnknownLabel(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("feature index {index} out of range for dimension {dimension}")]
    FeatureIndex { index: usize, dimension: usize },
    #[error("loss {0} requires a novelty source")]
    NoveltyRequired(LossKind),
    #[error("loss {0} does not take a novelty source")]
    NoveltyForbidden(LossKind),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Vanilla,
    Ccl,
    Oe,
    LabelSmoothing,
}

impl LossKind {
    pub fn needs_novelty(self) -> bool {
        matches!(self, LossKind::Ccl | LossKind::Oe)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Vanilla => "vanilla",
            LossKind::Ccl => "ccl",
            LossKind::Oe => "oe",
            LossKind::LabelSmoothing => "label_smoothing",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" | "ce" => Ok(LossKind::Vanilla),
            "ccl" => Ok(LossKind::Ccl),
            "oe" => Ok(LossKind::Oe),
            "label_smoothing" | "ls" => Ok(LossKind::LabelSmoothing),
            other => Err(format!("unknown loss {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub steps: usize,
    pub batch_n: usize,
    pub lambda: f64,
    pub oe_weight: f64,
    pub ls_alpha: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Vanilla,
            steps: 5000,
            batch_n: 40,
            lambda: 1.0,
            oe_weight: 1.0,
            ls_alpha: 0.1,
            learning_rate: 0.1,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: String| Err(ClassifierError::Config(m));
        if !(0.0..1.0).contains(&self.ls_alpha) {
            return bad(format!("ls_alpha {} outside [0, 1)", self.ls_alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.oe_weight >= 0.0 && self.oe_weight.is_finite()) {
            return bad(format!("oe_weight {} must be non-negative", self.oe_weight));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_n == 0 {
            return bad("batch_n must be at least 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Softmax over closed-set classes and its MaxProb summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxOutput {
    pub probabilities: Vec<f64>,
    pub confidence: f64,
    pub argmax: usize,
}

/// Numerically stable softmax. Argmax ties go to the lowest index.
pub fn softmax_confidence(logits: &[f64]) -> SoftmaxOutput {
    let mut argmax = 0;
    for (k, &z) in logits.iter().enumerate() {
        if z > logits[argmax] {
            argmax = k;
        }
    }
    let max = logits[argmax];
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    SoftmaxOutput {
        confidence: probabilities[argmax],
        probabilities,
        argmax,
    }
}

/// `log(sum(exp(logits)))` computed stably.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// `(1 - alpha)` on the gold class plus `alpha / K` everywhere.
pub fn smoothed_target(gold_index: usize, classes: usize, alpha: f64) -> Vec<f64> {
    let mut t = vec![alpha / classes as f64; classes];
    t[gold_index] += 1.0 - alpha;
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectivePrediction {
    pub predicted_label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Predict(SelectivePrediction),
    Abstain { confidence: f64 },
}

impl Decision {
    pub fn is_abstain(&self) -> bool {
        matches!(self, Decision::Abstain { .. })
    }
}

/// Model parameters. Weights are stored feature-major: the K class weights
/// of feature `d` live at `weights[d * K..(d + 1) * K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub feature_config: FeatureConfig,
    pub class_labels: Vec<String>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ClassifierState {
    pub fn zeros(feature_config: FeatureConfig, class_labels: Vec<String>) -> Result<Self, ClassifierError> {
        feature_config.validate()?;
        if class_labels.len() < 2 {
            return Err(ClassifierError::Config(format!(
                "{} class labels, need at least 2",
                class_labels.len()
            )));
        }
        let k = class_labels.len();
        Ok(Self {
            weights: vec![0.0; feature_config.dimension * k],
            bias: vec![0.0; k],
            feature_config,
            class_labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn dimension(&self) -> usize {
        self.feature_config.dimension
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.weights[feature * self.num_classes() + class]
    }

    pub fn set_weight(&mut self, class: usize, feature: usize, value: f64) {
        let k = self.num_classes();
        self.weights[feature * k + class] = value;
    }

    pub fn set_bias(&mut self, class: usize, value: f64) {
        self.bias[class] = value;
    }

    /// Number of scalar parameters: D*K weights followed by K biases.
    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Flattened parameter view in the same layout as [`Gradient::to_dense`].
    pub fn parameter(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    pub fn set_parameter(&mut self, i: usize, value: f64) {
        if i < self.weights.len() {
            self.weights[i] = value;
        } else {
            let n = self.weights.len();
            self.bias[i - n] = value;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|w| w.is_finite())
    }

    pub fn class_index(&self, label: &str) -> Result<usize, ClassifierError> {
        self.class_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ClassifierError::UnknownLabel(label.to_owned()))
    }

    fn check_features(&self, x: &SparseVector) -> Result<(), ClassifierError> {
        if x.min_dimension() > self.dimension() {
            return Err(ClassifierError::FeatureIndex {
                index: x.min_dimension() - 1,
                dimension: self.dimension(),
            });
        }
        Ok(())
    }

    /// `W x + b`. Panics if an index of `x` is out of range.
    pub fn logits(&self, x: &SparseVector) -> Vec<f64> {
        let k = self.num_classes();
        let mut z = self.bias.clone();
        for (d, v) in x.iter() {
            let row = &self.weights[d * k..(d + 1) * k];
            for (zk, w) in z.iter_mut().zip(row) {
                *zk += w * v;
            }
        }
        z
    }

    pub fn predict(&self, x: &SparseVector) -> SelectivePrediction {
        let out = softmax_confidence(&self.logits(x));
        SelectivePrediction {
            predicted_label: self.class_labels[out.argmax].clone(),
            confidence: out.confidence,
        }
    }

    pub fn predict_text(&self, text: &str) -> SelectivePrediction {
        self.predict(&featurize(text, &self.feature_config))
    }

    /// Predicts when confidence is strictly above `gamma`, abstains otherwise.
    pub fn predict_selective(&self, x: &SparseVector, gamma: f64) -> Decision {
        let p = self.predict(x);
        if p.confidence > gamma {
            Decision::Predict(p)
        } else {
            Decision::Abstain {
                confidence: p.confidence,
            }
        }
    }

    pub fn apply_gradient(&mut self, grad: &Gradient, learning_rate: f64) {
        let k = self.num_classes();
        for (&d, g) in &grad.columns {
            let row = &mut self.weights[d as usize * k..(d as usize + 1) * k];
            for (w, gk) in row.iter_mut().zip(g) {
                *w -= learning_rate * gk;
            }
        }
        for (b, gk) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= learning_rate * gk;
        }
    }

    pub fn to_model_file(&self) -> ModelFile {
        let k = self.num_classes();
        let columns = self
            .weights
            .chunks(k)
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&w| w != 0.0))
            .map(|(d, row)| ModelColumn {
                index: d as u32,
                weights: row.to_vec(),
            })
            .collect();
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            feature_fingerprint: self.feature_config.fingerprint(),
            feature_config: self.feature_config.clone(),
            class_labels: self.class_labels.clone(),
            bias: self.bias.clone(),
            columns,
        }
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self, ClassifierError> {
        let bad = |m: String| Err(ClassifierError::ModelFile(m));
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return bad(format!("unsupported {} v{}", file.format, file.version));
        }
        if file.feature_fingerprint != file.feature_config.fingerprint() {
            return bad("feature fingerprint does not match feature config".into());
        }
        let mut state = Self::zeros(file.feature_config, file.class_labels)?;
        let k = state.num_classes();
        if file.bias.len() != k {
            return bad(format!("bias has {} entries for {k} classes", file.bias.len()));
        }
        state.bias = file.bias;
        for col in file.columns {
            let d = col.index as usize;
            if d >= state.dimension() || col.weights.len() != k {
                return bad(format!("malformed column {d}"));
            }
            state.weights[d * k..(d + 1) * k].copy_from_slice(&col.weights);
        }
        if !state.is_finite() {
            return bad("non-finite parameter".into());
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let json = serde_json::to_string(&self.to_model_file())
            .map_err(|e| ClassifierError::ModelFile(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let raw = std::fs::read_to_string(path)?;
        let file: ModelFile =
            serde_json::from_str(&raw).map_err(|e| ClassifierError::ModelFile(e.to_string()))?;
        Self::from_model_file(file)
    }
}

/// On-disk model: only feature columns with a non-zero weight are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub feature_fingerprint: String,
    pub feature_config: FeatureConfig,
    pub class_labels: Vec<String>,
    pub bias: Vec<f64>,
    pub columns: Vec<ModelColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelColumn {
    pub index: u32,
    pub weights: Vec<f64>,
}

/// Gradient with the parameter shape of a [`ClassifierState`], stored
/// sparsely by feature column.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub columns: BTreeMap<u32, Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Gradient {
    fn zeros(classes: usize) -> Self {
        Self {
            columns: BTreeMap::new(),
            bias: vec![0.0; classes],
        }
    }

    /// Adds the parameter gradient of one example given `dL/dlogits`.
    fn add_example(&mut self, x: &SparseVector, dlogits: &[f64]) {
        let k = dlogits.len();
        for (d, v) in x.iter() {
            let col = self
                .columns
                .entry(d as u32)
                .or_insert_with(|| vec![0.0; k]);
            for (g, dz) in col.iter_mut().zip(dlogits) {
                *g += dz * v;
            }
        }
        for (g, dz) in self.bias.iter_mut().zip(dlogits) {
            *g += dz;
        }
    }

    pub fn norm(&self) -> f64 {
        self.columns
            .values()
            .flatten()
            .chain(&self.bias)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Dense `D*K + K` vector in [`ClassifierState::parameter`] order.
    pub fn to_dense(&self, dimension: usize) -> Vec<f64> {
        let k = self.bias.len();
        let mut out = vec![0.0; dimension * k + k];
        for (&d, col) in &self.columns {
            out[d as usize * k..(d as usize + 1) * k].copy_from_slice(col);
        }
        out[dimension * k..].copy_from_slice(&self.bias);
        out
    }
}

/// Loss value split into its cross-entropy and auxiliary parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub aux: f64,
}

/// A closed-set training example: features and class index.
pub type IdSample<'a> = (&'a SparseVector, usize);

struct Forward {
    probs: Vec<f64>,
    log_z: f64,
    logits: Vec<f64>,
    argmax: usize,
}

impl Forward {
    fn confidence(&self) -> f64 {
        self.probs[self.argmax]
    }

    /// `d c / d logits` with the argmax held fixed: `p_m (e_m - p)`.
    fn confidence_grad(&self) -> Vec<f64> {
        let pm = self.confidence();
        self.probs
            .iter()
            .enumerate()
            .map(|(j, &pj)| pm * (if j == self.argmax { 1.0 } else { 0.0 } - pj))
            .collect()
    }
}

fn forward(state: &ClassifierState, x: &SparseVector) -> Forward {
    let logits = state.logits(x);
    let out = softmax_confidence(&logits);
    Forward {
        log_z: log_sum_exp(&logits),
        probs: out.probabilities,
        argmax: out.argmax,
        logits,
    }
}

fn check_id_batch(state: &ClassifierState, batch: &[IdSample<'_>]) -> Result<(), ClassifierError> {
    if batch.is_empty() {
        return Err(ClassifierError::EmptyBatch);
    }
    let k = state.num_classes();
    for (x, y) in batch {
        if *y >= k {
            return Err(ClassifierError::ClassIndex {
                index: *y,
                classes: k,
            });
        }
        state.check_features(x)?;
    }
    Ok(())
}

fn check_ood_batch(state: &ClassifierState, batch: &[&SparseVector]) -> Result<(), ClassifierError> {
    if batch.is_empty() {
        return Err(ClassifierError::EmptyBatch);
    }
    for x in batch {
        state.check_features(x)?;
    }
    Ok(())
}

/// Mean soft-target cross-entropy over the ID batch. Returns the loss, the
/// per-example logit gradients, and the forward passes for reuse.
fn id_cross_entropy(
    state: &ClassifierState,
    batch: &[IdSample<'_>],
    alpha: f64,
) -> (f64, Vec<Vec<f64>>, Vec<Forward>) {
    let k = state.num_classes();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(batch.len());
    let mut fwds = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let f = forward(state, x);
        let target = smoothed_target(*y, k, alpha);
        // -sum_k t_k log p_k with log p_k = z_k - logZ
        loss += target
            .iter()
            .zip(&f.logits)
            .map(|(t, z)| t * (f.log_z - z))
            .sum::<f64>();
        dlogits.push(f.probs.iter().zip(&target).map(|(p, t)| (p - t) / n).collect());
        fwds.push(f);
    }
    (loss / n, dlogits, fwds)
}

fn assemble(
    batch: &[IdSample<'_>],
    id_dlogits: Vec<Vec<f64>>,
    ood: &[&SparseVector],
    ood_dlogits: Vec<Vec<f64>>,
    classes: usize,
) -> Gradient {
    let mut grad = Gradient::zeros(classes);
    for ((x, _), dz) in batch.iter().zip(&id_dlogits) {
        grad.add_example(x, dz);
    }
    for (x, dz) in ood.iter().zip(&ood_dlogits) {
        if dz.iter().all(|d| *d == 0.0) {
            continue;
        }
        grad.add_example(x, dz);
    }
    grad
}

/// Mean cross-entropy on the ID batch.
pub fn vanilla_batch_loss(
    state: &ClassifierState,
    id_batch: &[IdSample<'_>],
) -> Result<(LossValue, Gradient), ClassifierError> {
    label_smoothing_batch_loss(state, id_batch, 0.0)
}

/// Cross-entropy against smoothed targets.
pub fn label_smoothing_batch_loss(
    state: &ClassifierState,
    id_batch: &[IdSample<'_>],
    alpha: f64,
) -> Result<(LossValue, Gradient), ClassifierError> {
    check_id_batch(state, id_batch)?;
    let (ce, dz, _) = id_cross_entropy(state, id_batch, alpha);
    let grad = assemble(id_batch, dz, &[], Vec::new(), state.num_classes());
    Ok((LossValue { total: ce, ce, aux: 0.0 }, grad))
}

/// Contrastive confidence loss on one ID batch and one novelty batch.
pub fn ccl_batch_loss(
    state: &ClassifierState,
    id_batch: &[IdSample<'_>],
    ood_batch: &[&SparseVector],
    lambda: f64,
) -> Result<(LossValue, Gradient), ClassifierError> {
    check_id_batch(state, id_batch)?;
    check_ood_batch(state, ood_batch)?;
    let (ce, mut id_dz, id_fwd) = id_cross_entropy(state, id_batch, 0.0);
    let ood_fwd: Vec<Forward> = ood_batch.iter().map(|x| forward(state, x)).collect();
    let id_conf: Vec<f64> = id_fwd.iter().map(Forward::confidence).collect();
    let ood_conf: Vec<f64> = ood_fwd.iter().map(Forward::confidence).collect();

    let pairs = (id_batch.len() * ood_batch.len()) as f64;
    let mut hinge = 0.0;
    let mut id_active = vec![0usize; id_batch.len()];
    let mut ood_active = vec![0usize; ood_batch.len()];
    for (i, ci) in id_conf.iter().enumerate() {
        for (j, cj) in ood_conf.iter().enumerate() {
            if cj > ci {
                hinge += cj - ci;
                id_active[i] += 1;
                ood_active[j] += 1;
            }
        }
    }
    let hinge = hinge / pairs;

    for ((dz, f), &count) in id_dz.iter_mut().zip(&id_fwd).zip(&id_active) {
        if count > 0 {
            let scale = -lambda * count as f64 / pairs;
            for (d, g) in dz.iter_mut().zip(f.confidence_grad()) {
                *d += scale * g;
            }
        }
    }
    let k = state.num_classes();
    let ood_dz: Vec<Vec<f64>> = ood_fwd
        .iter()
        .zip(&ood_active)
        .map(|(f, &count)| {
            if count == 0 {
                return vec![0.0; k];
            }
            let scale = lambda * count as f64 / pairs;
            f.confidence_grad().into_iter().map(|g| scale * g).collect()
        })
        .collect();

    let aux = lambda * hinge;
    let grad = assemble(id_batch, id_dz, ood_batch, ood_dz, k);
    Ok((LossValue { total: ce + aux, ce, aux }, grad))
}

/// Unweighted mean pairwise hinge `max(0, c_ood - c_id)` over all pairs.
pub fn pairwise_hinge(id_confidences: &[f64], ood_confidences: &[f64]) -> f64 {
    let mut sum = 0.0;
    for ci in id_confidences {
        for cj in ood_confidences {
            sum += (cj - ci).max(0.0);
        }
    }
    sum / (id_confidences.len() * ood_confidences.len()) as f64
}

/// Outlier exposure: cross-entropy plus uniform-target cross-entropy on the
/// novelty batch.
pub fn oe_batch_loss(
    state: &ClassifierState,
    id_batch: &[IdSample<'_>],
    ood_batch: &[&SparseVector],
    oe_weight: f64,
) -> Result<(LossValue, Gradient), ClassifierError> {
    check_id_batch(state, id_batch)?;
    check_ood_batch(state, ood_batch)?;
    let k = state.num_classes();
    let uniform = 1.0 / k as f64;
    let (ce, id_dz, _) = id_cross_entropy(state, id_batch, 0.0);
    let m = ood_batch.len() as f64;
    let mut oe = 0.0;
    let mut ood_dz = Vec::with_capacity(ood_batch.len());
    for x in ood_batch {
        let f = forward(state, x);
        oe += f.logits.iter().map(|z| uniform * (f.log_z - z)).sum::<f64>();
        ood_dz.push(
            f.probs
                .iter()
                .map(|p| oe_weight * (p - uniform) / m)
                .collect(),
        );
    }
    let aux = oe_weight * oe / m;
    let grad = assemble(id_batch, id_dz, ood_batch, ood_dz, k);
    Ok((LossValue { total: ce + aux, ce, aux }, grad))
}

/// Dispatches to the batch loss selected by `config.loss`. `ood_batch` is
/// ignored for losses that do not use novelty data.
pub fn batch_loss(
    state: &ClassifierState,
    config: &TrainConfig,
    id_batch: &[IdSample<'_>],
    ood_batch: &[&SparseVector],
) -> Result<(LossValue, Gradient), ClassifierError> {
    match config.loss {
        LossKind::Vanilla => vanilla_batch_loss(state, id_batch),
        LossKind::LabelSmoothing => label_smoothing_batch_loss(state, id_batch, config.ls_alpha),
        LossKind::Ccl => ccl_batch_loss(state, id_batch, ood_batch, config.lambda),
        LossKind::Oe => oe_batch_loss(state, id_batch, ood_batch, config.oe_weight),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub aux: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: ClassifierState,
    pub log: Vec<TrainLogRecord>,
}

impl TrainOutcome {
    pub fn write_log(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.log {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

/// Trains from zero weights with plain SGD.
///
/// Each step draws `batch_n` training examples and, for CCL and OE,
/// `batch_n` novelty examples, uniformly with replacement from a stream
/// seeded by `config.seed`. Steps `0, log_every, 2*log_every, ...` and the
/// final step are logged with the loss before the update.
pub fn train(
    split: &OpenSetSplit,
    novelty: Option<&NoveltySource>,
    config: &TrainConfig,
    feature_config: &FeatureConfig,
) -> Result<TrainOutcome, ClassifierError> {
    config.validate()?;
    match (config.loss.needs_novelty(), novelty) {
        (true, None) => return Err(ClassifierError::NoveltyRequired(config.loss)),
        (false, Some(_)) => return Err(ClassifierError::NoveltyForbidden(config.loss)),
        (true, Some(n)) if n.is_empty() => {
            return Err(ClassifierError::Config("novelty source is empty".into()))
        }
        _ => {}
    }
    if split.train.is_empty() {
        return Err(ClassifierError::Config("training set is empty".into()));
    }
    let mut state = ClassifierState::zeros(feature_config.clone(), split.closed_labels.clone())?;

    let train_x: Vec<SparseVector> = split
        .train
        .iter()
        .map(|e| featurize(&e.text, feature_config))
        .collect();
    let train_y: Vec<usize> = split
        .train
        .iter()
        .map(|e| state.class_index(&e.label))
        .collect::<Result<_, _>>()?;
    let novel_x: Vec<SparseVector> = novelty
        .map(|n| {
            n.items
                .iter()
                .map(|e| featurize(&e.text, feature_config))
                .collect()
        })
        .unwrap_or_default();

    let mut rng = seeded_rng(config.seed, "train-batches");
    let mut log = Vec::new();
    for step in 0..config.steps {
        let id_batch: Vec<IdSample<'_>> = (0..config.batch_n)
            .map(|_| {
                let i = rng.gen_range(0..train_x.len());
                (&train_x[i], train_y[i])
            })
            .collect();
        let ood_batch: Vec<&SparseVector> = if novel_x.is_empty() {
            Vec::new()
        } else {
            (0..config.batch_n)
                .map(|_| &novel_x[rng.gen_range(0..novel_x.len())])
                .collect()
        };
        let (value, grad) = batch_loss(&state, config, &id_batch, &ood_batch)?;
        if step % config.log_every == 0 || step + 1 == config.steps {
            log.push(TrainLogRecord {
                step,
                loss: value.total,
                ce: value.ce,
                aux: value.aux,
                grad_norm: grad.norm(),
            });
        }
        state.apply_gradient(&grad, config.learning_rate);
    }
    if !state.is_finite() {
        return Err(ClassifierError::Config(
            "training diverged to non-finite parameters".into(),
        ));
    }
    Ok(TrainOutcome { state, log })
}

/// Fraction of `examples` whose predicted label equals the gold label.
pub fn accuracy(state: &ClassifierState, examples: &[crate::corpus::LabeledExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let correct = examples
        .iter()
        .filter(|e| state.predict_text(&e.text).predicted_label == e.label)
        .count();
    correct as f64 / examples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabeledExample, Origin};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(dimension: usize) -> FeatureConfig {
        FeatureConfig {
            dimension,
            ..Default::default()
        }
    }

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn random_state(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ClassifierState {
        let mut s = ClassifierState::zeros(small_config(d), labels(k)).unwrap();
        for i in 0..s.parameter_count() {
            s.set_parameter(i, rng.gen_range(-1.0..1.0));
        }
        s
    }

    fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> SparseVector {
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for i in 0..d {
            if rng.gen_bool(0.5) {
                idx.push(i as u32);
                val.push(rng.gen_range(-1.0..1.0));
            }
        }
        SparseVector::new(idx, val)
    }

    fn central_difference<F: Fn(&ClassifierState) -> f64>(
        state: &ClassifierState,
        f: F,
        h: f64,
    ) -> Vec<f64> {
        let mut s = state.clone();
        (0..state.parameter_count())
            .map(|i| {
                let orig = s.parameter(i);
                s.set_parameter(i, orig + h);
                let up = f(&s);
                s.set_parameter(i, orig - h);
                let down = f(&s);
                s.set_parameter(i, orig);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn logits_linear() {
        let cfg = small_config(8);
        let s = ClassifierState::zeros(cfg, labels(3)).unwrap();
        let x = SparseVector::new(vec![1, 4], vec![0.5, 2.0]);
        assert_eq!(s.logits(&x), vec![0.0; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&mut rng, 3, 8);
        assert_eq!(s.logits(&SparseVector::default()), s.bias().to_vec());
        let z1 = s.logits(&x);
        let z2 = s.logits(&x.scaled(2.0));
        for k in 0..3 {
            let a = 2.0 * (z1[k] - s.bias()[k]);
            let b = z2[k] - s.bias()[k];
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let out = softmax_confidence(&[0.0, 0.0, 0.0]);
        for p in &out.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(out.argmax, 0);
        assert!((out.confidence - 1.0 / 3.0).abs() < 1e-15);

        // 1 / (1 + e^-10)
        let out = softmax_confidence(&[10.0, 0.0]);
        assert!((out.confidence - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert_eq!(out.argmax, 0);

        let shifted = softmax_confidence(&[1010.0, 1000.0]);
        assert!((shifted.confidence - out.confidence).abs() < 1e-15);
    }

    #[test]
    fn selective_thresholds() {
        let mut s = ClassifierState::zeros(small_config(4), labels(2)).unwrap();
        s.set_bias(1, 1.0);
        let x = SparseVector::default();
        assert!(s.predict_selective(&x, 1.0).is_abstain());
        assert!(!s.predict_selective(&x, 0.0).is_abstain());
        let c = s.predict(&x).confidence;
        assert!(s.predict_selective(&x, c).is_abstain());
        match s.predict_selective(&x, c - 1e-12) {
            Decision::Predict(p) => assert_eq!(p.predicted_label, "c1"),
            d => panic!("{d:?}"),
        }
    }

    #[test]
    fn smoothed_target_formula() {
        assert_eq!(smoothed_target(0, 4, 0.1), vec![0.925, 0.025, 0.025, 0.025]);
        assert_eq!(smoothed_target(2, 3, 0.0), vec![0.0, 0.0, 1.0]);
        let t = smoothed_target(1, 7, 0.37);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hinge_arithmetic() {
        assert!((pairwise_hinge(&[0.5], &[0.8]) - 0.3).abs() < 1e-15);
        assert_eq!(pairwise_hinge(&[0.5], &[0.3]), 0.0);
        assert_eq!(pairwise_hinge(&[0.5], &[0.5]), 0.0);
    }

    /// A state where the single ID example and the single OOD example have
    /// chosen confidences; features are disjoint one-hots.
    fn two_point_state(id_logit: f64, ood_logit: f64) -> (ClassifierState, SparseVector, SparseVector) {
        let mut s = ClassifierState::zeros(small_config(4), labels(2)).unwrap();
        s.set_weight(0, 0, id_logit);
        s.set_weight(0, 1, ood_logit);
        (
            s,
            SparseVector::new(vec![0], vec![1.0]),
            SparseVector::new(vec![1], vec![1.0]),
        )
    }

    #[test]
    fn inactive_hinge_has_no_gradient() {
        // c_id = sigmoid(2) > c_ood = sigmoid(0.5)
        let (s, xi, xo) = two_point_state(2.0, 0.5);
        let (v, g) = ccl_batch_loss(&s, &[(&xi, 0)], &[&xo], 1.0).unwrap();
        assert_eq!(v.aux, 0.0);
        assert!(!g.columns.contains_key(&1));
        let (vv, gv) = vanilla_batch_loss(&s, &[(&xi, 0)]).unwrap();
        assert_eq!(v.total, vv.total);
        assert_eq!(g.columns[&0], gv.columns[&0]);
    }

    #[test]
    fn hinge_inactive_at_equality() {
        let (s, xi, xo) = two_point_state(1.0, 1.0);
        let (v, g) = ccl_batch_loss(&s, &[(&xi, 0)], &[&xo], 1.0).unwrap();
        assert_eq!(v.aux, 0.0);
        assert!(!g.columns.contains_key(&1));
    }

    #[test]
    fn active_hinge_value() {
        let (s, xi, xo) = two_point_state(0.5, 2.0);
        let (v, _) = ccl_batch_loss(&s, &[(&xi, 0)], &[&xo], 1.0).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        assert!((v.aux - (sig(2.0) - sig(0.5))).abs() < 1e-14);
    }

    #[test]
    fn oe_uniform_minimum() {
        let s = ClassifierState::zeros(small_config(4), labels(4)).unwrap();
        let xi = SparseVector::new(vec![0], vec![1.0]);
        let xo = SparseVector::new(vec![1], vec![1.0]);
        let (v, g) = oe_batch_loss(&s, &[(&xi, 0)], &[&xo], 1.0).unwrap();
        assert!((v.aux - 4f64.ln()).abs() < 1e-14);
        assert!(g.columns.get(&1).is_none_or(|c| c.iter().all(|x| x.abs() < 1e-15)));
    }

    #[test]
    fn oe_weight_zero_is_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_state(&mut rng, 3, 8);
        let xs: Vec<_> = (0..3).map(|_| random_vector(&mut rng, 8)).collect();
        let id: Vec<IdSample<'_>> = vec![(&xs[0], 1), (&xs[1], 2)];
        let (v_oe, g_oe) = oe_batch_loss(&s, &id, &[&xs[2]], 0.0).unwrap();
        let (v_ce, g_ce) = vanilla_batch_loss(&s, &id).unwrap();
        assert_eq!(v_oe.total, v_ce.total);
        assert_eq!(g_oe.to_dense(8), g_ce.to_dense(8));
    }

    #[test]
    fn unknown_labels_rejected() {
        let s = ClassifierState::zeros(small_config(4), labels(2)).unwrap();
        let x = SparseVector::new(vec![0], vec![1.0]);
        assert!(matches!(
            ccl_batch_loss(&s, &[(&x, 5)], &[&x], 1.0),
            Err(ClassifierError::ClassIndex { index: 5, .. })
        ));
        assert!(matches!(s.class_index("nope"), Err(ClassifierError::UnknownLabel(_))));
        assert!(matches!(
            ccl_batch_loss(&s, &[], &[&x], 1.0),
            Err(ClassifierError::EmptyBatch)
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..5 {
            let s = random_state(&mut rng, 3, 8);
            let xs: Vec<_> = (0..4).map(|_| random_vector(&mut rng, 8)).collect();
            let id: Vec<IdSample<'_>> = vec![(&xs[0], 0), (&xs[1], 2)];
            let ood: Vec<&SparseVector> = vec![&xs[2], &xs[3]];
            let configs = [
                TrainConfig { loss: LossKind::Vanilla, ..Default::default() },
                TrainConfig { loss: LossKind::Ccl, lambda: 1.0, ..Default::default() },
                TrainConfig { loss: LossKind::Oe, oe_weight: 0.7, ..Default::default() },
                TrainConfig { loss: LossKind::LabelSmoothing, ls_alpha: 0.1, ..Default::default() },
            ];
            for cfg in &configs {
                let (_, g) = batch_loss(&s, cfg, &id, &ood).unwrap();
                let fd = central_difference(&s, |t| batch_loss(t, cfg, &id, &ood).unwrap().0.total, h);
                let err = rel_err(&g.to_dense(8), &fd);
                assert!(err < 1e-4, "{:?}: {err}", cfg.loss);
            }
        }
    }

    fn toy_split() -> OpenSetSplit {
        let mut train = Vec::new();
        for i in 0..20 {
            train.push(LabeledExample::new(format!("a{i}"), format!("apple pear {i}"), "fruit", Origin::Train).unwrap());
            train.push(LabeledExample::new(format!("b{i}"), format!("car truck {i}"), "vehicle", Origin::Train).unwrap());
        }
        OpenSetSplit {
            closed_labels: vec!["fruit".into(), "vehicle".into()],
            heldout_labels: vec!["animal".into()],
            train,
            id_test: Vec::new(),
            ood_test: Vec::new(),
        }
    }

    #[test]
    fn vanilla_separates_toy_set() {
        let split = toy_split();
        let cfg = TrainConfig { steps: 200, ..Default::default() };
        let out = train(&split, None, &cfg, &small_config(1 << 12)).unwrap();
        assert_eq!(accuracy(&out.state, &split.train), 1.0);
        assert_eq!(out.log.first().unwrap().step, 0);
        assert_eq!(out.log.last().unwrap().step, 199);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let split = toy_split();
        let novelty = NoveltySource::generated(vec![
            LabeledExample::new("n0", "dog cat", "animal", Origin::Generated).unwrap(),
        ]);
        let cfg = TrainConfig { loss: LossKind::Ccl, steps: 50, seed: 9, ..Default::default() };
        let a = train(&split, Some(&novelty), &cfg, &small_config(1 << 10)).unwrap();
        let b = train(&split, Some(&novelty), &cfg, &small_config(1 << 10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn novelty_presence_checked() {
        let split = toy_split();
        let fc = small_config(1 << 10);
        let novelty = NoveltySource::generated(vec![
            LabeledExample::new("n0", "dog", "animal", Origin::Generated).unwrap(),
        ]);
        let ccl = TrainConfig { loss: LossKind::Ccl, steps: 1, ..Default::default() };
        assert!(matches!(train(&split, None, &ccl, &fc), Err(ClassifierError::NoveltyRequired(_))));
        let van = TrainConfig { steps: 1, ..Default::default() };
        assert!(matches!(
            train(&split, Some(&novelty), &van, &fc),
            Err(ClassifierError::NoveltyForbidden(_))
        ));
    }

    #[test]
    fn model_file_roundtrip() {
        let split = toy_split();
        let out = train(&split, None, &TrainConfig { steps: 20, ..Default::default() }, &small_config(1 << 10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        out.state.save(&path).unwrap();
        let back = ClassifierState::load(&path).unwrap();
        assert_eq!(back, out.state);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { ls_alpha: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_n: 0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn maxprob_in_range_and_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..6),
            shift in -100.0f64..100.0,
            temp in 0.05f64..20.0,
        ) {
            let k = logits.len() as f64;
            let out = softmax_confidence(&logits);
            prop_assert!(out.confidence >= 1.0 / k - 1e-15 && out.confidence <= 1.0);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let s = softmax_confidence(&shifted);
            prop_assert_eq!(s.argmax, out.argmax);
            for (a, b) in s.probabilities.iter().zip(&out.probabilities) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let scaled: Vec<f64> = logits.iter().map(|z| z * temp).collect();
            prop_assert_eq!(softmax_confidence(&scaled).argmax, out.argmax);
        }

        #[test]
        fn hinge_nonnegative_and_zero_iff_ordered(
            id in proptest::collection::vec(0.0f64..1.0, 1..6),
            ood in proptest::collection::vec(0.0f64..1.0, 1..6),
        ) {
            let h = pairwise_hinge(&id, &ood);
            prop_assert!(h >= 0.0);
            let min_id = id.iter().copied().fold(f64::INFINITY, f64::min);
            let max_ood = ood.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(h == 0.0, max_ood <= min_id);
        }
    }
}
