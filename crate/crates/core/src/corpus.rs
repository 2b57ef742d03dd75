//! Labeled corpora, open-set splits and novelty sources.
//!
//! A corpus is loaded from JSONL, CSV or TSV into [`LabeledExample`]s with
//! normalized labels. [`make_open_set_split`] moves every example of the
//! held-out labels into the novel-class test pool, and the remaining
//! closed-set examples are shuffled and cut into train and in-distribution
//! test sets. [`NoveltySource`] wraps whatever is used as the auxiliary
//! "novel" set during training.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeded_rng;

/// Default fraction of closed-set examples moved to the ID test set.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0} contains no records")]
    Empty(PathBuf),
    #[error("held-out label {0:?} does not occur in the corpus")]
    UnknownHeldout(String),
    #[error("only {0} closed-set label(s) would remain; at least 2 are required")]
    TooFewClosedLabels(usize),
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    BadTestFraction(f64),
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("invalid mixture request: {0}")]
    BadMixture(String),
    #[error("invalid label map: {0}")]
    LabelMap(String),
}

/// Where an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Train,
    IdTest,
    OodTest,
    Generated,
    External,
}

impl Origin {
    /// True for examples drawn from the closed label set.
    pub fn is_closed_set(self) -> bool {
        matches!(self, Origin::Train | Origin::IdTest)
    }
}

/// One text instance with its class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub label: String,
    pub origin: Origin,
}

impl LabeledExample {
    /// Builds an example, normalizing the label. Returns `None` when the
    /// text is blank.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        label: &str,
        origin: Origin,
    ) -> Option<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return None;
        }
        Some(Self {
            id: id.into(),
            text,
            label: normalize_label(label),
            origin,
        })
    }
}

/// Lowercases, trims and collapses internal whitespace runs to one space.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Input file layout accepted by [`load_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
    Tsv,
}

impl CorpusFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Some(Self::Jsonl),
            "csv" => Some(Self::Csv),
            "tsv" => Some(Self::Tsv),
            _ => None,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            "tsv" => Ok(Self::Tsv),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Jsonl => "jsonl",
            Self::Csv => "csv",
            Self::Tsv => "tsv",
        })
    }
}

/// Manual label renames applied after normalization, e.g. `LOC -> location`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    renames: BTreeMap<String, String>,
}

impl LabelMap {
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let renames = pairs
            .into_iter()
            .map(|(k, v)| (normalize_label(k.as_ref()), normalize_label(v.as_ref())))
            .collect();
        Self { renames }
    }

    /// Reads a JSON object `{"LOC": "location", ...}`.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let raw = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let map: BTreeMap<String, String> =
            serde_json::from_str(&raw).map_err(|e| CorpusError::LabelMap(e.to_string()))?;
        Ok(Self::from_pairs(map))
    }

    pub fn apply(&self, label: &str) -> String {
        let norm = normalize_label(label);
        self.renames.get(&norm).cloned().unwrap_or(norm)
    }

    pub fn apply_all(&self, examples: &mut [LabeledExample]) {
        for ex in examples {
            ex.label = self.apply(&ex.label);
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: Option<String>,
    label: Option<serde_json::Value>,
}

fn json_label(value: serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn file_stem(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads a labeled corpus. Every example gets origin [`Origin::Train`];
/// records without an id get `"<filename>:<line-number>"`.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<LabeledExample>, CorpusError> {
    load_corpus_as(path, format, Origin::Train)
}

/// Like [`load_corpus`] but tags every record with `origin`.
pub fn load_corpus_as(
    path: &Path,
    format: CorpusFormat,
    origin: Origin,
) -> Result<Vec<LabeledExample>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let stem = file_stem(path);
    let record_err = |line: usize, message: String| CorpusError::Record {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut out = Vec::new();
    match format {
        CorpusFormat::Jsonl => {
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line_no = idx + 1;
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord = serde_json::from_str(&line)
                    .map_err(|e| record_err(line_no, format!("invalid JSON: {e}")))?;
                let text = rec
                    .text
                    .ok_or_else(|| record_err(line_no, "missing field \"text\"".into()))?;
                let label = rec
                    .label
                    .and_then(json_label)
                    .ok_or_else(|| record_err(line_no, "missing field \"label\"".into()))?;
                let id = rec
                    .id
                    .and_then(json_label)
                    .unwrap_or_else(|| format!("{stem}:{line_no}"));
                let ex = LabeledExample::new(id, text, &label, origin)
                    .ok_or_else(|| record_err(line_no, "empty text".into()))?;
                out.push(ex);
            }
        }
        CorpusFormat::Csv | CorpusFormat::Tsv => {
            let delimiter = if format == CorpusFormat::Csv { b',' } else { b'\t' };
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(delimiter)
                .flexible(true)
                .from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| record_err(1, format!("unreadable header: {e}")))?
                .clone();
            let column = |name: &str| {
                headers
                    .iter()
                    .position(|h| h.trim().eq_ignore_ascii_case(name))
            };
            let text_col = column("text")
                .ok_or_else(|| record_err(1, "header has no \"text\" column".into()))?;
            let label_col = column("label")
                .ok_or_else(|| record_err(1, "header has no \"label\" column".into()))?;
            let id_col = column("id");
            for rec in reader.records() {
                let rec = rec.map_err(|e| {
                    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                    record_err(line, e.to_string())
                })?;
                let line_no = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                let text = rec
                    .get(text_col)
                    .ok_or_else(|| record_err(line_no, "missing field \"text\"".into()))?;
                let label = rec
                    .get(label_col)
                    .filter(|l| !l.trim().is_empty())
                    .ok_or_else(|| record_err(line_no, "missing field \"label\"".into()))?;
                let id = id_col
                    .and_then(|c| rec.get(c))
                    .filter(|s| !s.trim().is_empty())
                    .map(str::to_owned)
                    .unwrap_or_else(|| format!("{stem}:{line_no}"));
                let ex = LabeledExample::new(id, text, label, origin)
                    .ok_or_else(|| record_err(line_no, "empty text".into()))?;
                out.push(ex);
            }
        }
    }
    if out.is_empty() {
        return Err(CorpusError::Empty(path.to_path_buf()));
    }
    ensure_unique_ids(&out)?;
    Ok(out)
}

/// Writes examples as JSONL with keys id, text, label, origin.
pub fn write_jsonl(path: &Path, examples: &[LabeledExample]) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads JSONL previously written by [`write_jsonl`], keeping stored origins.
pub fn read_jsonl(path: &Path) -> Result<Vec<LabeledExample>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub(crate) fn ensure_unique_ids(examples: &[LabeledExample]) -> Result<(), CorpusError> {
    let mut seen = HashSet::with_capacity(examples.len());
    for ex in examples {
        if !seen.insert(ex.id.as_str()) {
            return Err(CorpusError::DuplicateId(ex.id.clone()));
        }
    }
    Ok(())
}

/// Closed-set train/test pools plus the novel-class test pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub closed_labels: Vec<String>,
    pub heldout_labels: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub id_test: Vec<LabeledExample>,
    pub ood_test: Vec<LabeledExample>,
}

impl OpenSetSplit {
    /// Index of `label` in `closed_labels`.
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.closed_labels.iter().position(|l| l == label)
    }

    /// Checks every structural invariant of a split.
    pub fn validate(&self) -> Result<(), String> {
        if self.closed_labels.len() < 2 {
            return Err(format!(
                "{} closed labels, need at least 2",
                self.closed_labels.len()
            ));
        }
        let closed: BTreeSet<&str> = self.closed_labels.iter().map(String::as_str).collect();
        let held: BTreeSet<&str> = self.heldout_labels.iter().map(String::as_str).collect();
        if let Some(l) = closed.intersection(&held).next() {
            return Err(format!("label {l:?} is both closed and held out"));
        }
        for ex in self.train.iter().chain(&self.id_test) {
            if !closed.contains(ex.label.as_str()) {
                return Err(format!("{} has non-closed label {:?}", ex.id, ex.label));
            }
        }
        for ex in &self.ood_test {
            if !held.contains(ex.label.as_str()) {
                return Err(format!("{} has non-held-out label {:?}", ex.id, ex.label));
            }
        }
        Ok(())
    }

    /// Same split with the training set cut down to `count` examples,
    /// chosen by seeded shuffle.
    pub fn subsample_train(&self, count: usize, seed: u64) -> OpenSetSplit {
        let mut train = self.train.clone();
        let mut rng = seeded_rng(seed, "subsample-train");
        train.shuffle(&mut rng);
        train.truncate(count);
        OpenSetSplit {
            train,
            ..self.clone()
        }
    }
}

/// Holds out `heldout_labels` and splits the rest into train and ID test.
///
/// The closed-set examples are shuffled with `seed`; the first
/// `round(n * test_fraction)` go to `id_test`, the remainder to `train`.
pub fn make_open_set_split(
    corpus: &[LabeledExample],
    heldout_labels: &[String],
    test_fraction: f64,
    seed: u64,
) -> Result<OpenSetSplit, CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::BadTestFraction(test_fraction));
    }
    ensure_unique_ids(corpus)?;
    let present: BTreeSet<&str> = corpus.iter().map(|e| e.label.as_str()).collect();
    let heldout: BTreeSet<String> = heldout_labels.iter().map(|l| normalize_label(l)).collect();
    for label in &heldout {
        if !present.contains(label.as_str()) {
            return Err(CorpusError::UnknownHeldout(label.clone()));
        }
    }
    let closed_labels: Vec<String> = present
        .iter()
        .filter(|l| !heldout.contains(**l))
        .map(|l| l.to_string())
        .collect();
    if closed_labels.len() < 2 {
        return Err(CorpusError::TooFewClosedLabels(closed_labels.len()));
    }

    let mut closed = Vec::new();
    let mut ood_test = Vec::new();
    for ex in corpus {
        if heldout.contains(&ex.label) {
            ood_test.push(LabeledExample {
                origin: Origin::OodTest,
                ..ex.clone()
            });
        } else {
            closed.push(ex.clone());
        }
    }
    let mut rng = seeded_rng(seed, "open-set-split");
    closed.shuffle(&mut rng);
    let n_test = ((closed.len() as f64) * test_fraction).round() as usize;
    let train: Vec<LabeledExample> = closed
        .split_off(n_test)
        .into_iter()
        .map(|ex| LabeledExample {
            origin: Origin::Train,
            ..ex
        })
        .collect();
    let id_test = closed
        .into_iter()
        .map(|ex| LabeledExample {
            origin: Origin::IdTest,
            ..ex
        })
        .collect();

    Ok(OpenSetSplit {
        closed_labels,
        heldout_labels: heldout.into_iter().collect(),
        train,
        id_test,
        ood_test,
    })
}

/// What kind of auxiliary set a [`NoveltySource`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyKind {
    Generated,
    ExternalFile,
    GoldHeldout,
    Mixture,
}

/// The auxiliary "novel" set consumed by CCL and OE training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltySource {
    pub kind: NoveltyKind,
    pub items: Vec<LabeledExample>,
    /// Requested fraction of closed-set items, only set for mixtures.
    pub mixture_id_fraction: Option<f64>,
}

impl NoveltySource {
    pub fn generated(items: Vec<LabeledExample>) -> Self {
        Self {
            kind: NoveltyKind::Generated,
            items,
            mixture_id_fraction: None,
        }
    }

    pub fn external(items: Vec<LabeledExample>) -> Self {
        Self {
            kind: NoveltyKind::ExternalFile,
            items,
            mixture_id_fraction: None,
        }
    }

    /// The gold-data oracle: the held-out class examples themselves.
    pub fn gold_heldout(pool: &[LabeledExample]) -> Self {
        Self {
            kind: NoveltyKind::GoldHeldout,
            items: pool.to_vec(),
            mixture_id_fraction: None,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The first `count` items, keeping kind and order.
    pub fn prefix(&self, count: usize) -> Self {
        Self {
            items: self.items[..count.min(self.items.len())].to_vec(),
            ..self.clone()
        }
    }

    /// Fraction of items whose origin is a closed-set pool.
    pub fn closed_set_fraction(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        let n = self.items.iter().filter(|e| e.origin.is_closed_set()).count();
        n as f64 / self.items.len() as f64
    }
}

fn draw(pool: &[LabeledExample], count: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledExample> {
    if count <= pool.len() {
        pool.choose_multiple(rng, count).cloned().collect()
    } else {
        (0..count)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect()
    }
}

/// Mixes held-out novel-class data with closed-set "noise".
///
/// `round(size * id_fraction)` items come from `id_pool` and the rest from
/// `ood_pool`. A pool is sampled without replacement when it is large
/// enough and with replacement otherwise. Items keep their original origin
/// and get fresh ids of the form `mix:<position>:<original id>`.
pub fn build_noise_mixture(
    ood_pool: &[LabeledExample],
    id_pool: &[LabeledExample],
    id_fraction: f64,
    size: usize,
    seed: u64,
) -> Result<NoveltySource, CorpusError> {
    if !(0.0..=1.0).contains(&id_fraction) {
        return Err(CorpusError::BadMixture(format!(
            "id_fraction {id_fraction} outside [0, 1]"
        )));
    }
    if size == 0 {
        return Err(CorpusError::BadMixture("size must be at least 1".into()));
    }
    let n_id = ((size as f64) * id_fraction).round() as usize;
    let n_ood = size - n_id;
    if (n_id > 0 && id_pool.is_empty()) || (n_ood > 0 && ood_pool.is_empty()) {
        return Err(CorpusError::BadMixture("empty pool".into()));
    }
    let mut rng = seeded_rng(seed, "noise-mixture");
    let mut items = draw(id_pool, n_id, &mut rng);
    items.extend(draw(ood_pool, n_ood, &mut rng));
    items.shuffle(&mut rng);
    for (pos, item) in items.iter_mut().enumerate() {
        item.id = format!("mix:{pos}:{}", item.id);
    }
    Ok(NoveltySource {
        kind: NoveltyKind::Mixture,
        items,
        mixture_id_fraction: Some(id_fraction),
    })
}
