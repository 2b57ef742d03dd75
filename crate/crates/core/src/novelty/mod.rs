//! Novelty prompting: ask a completion backend for novel labels, filter them,
//! then ask for examples of those labels.
//!
//! Label prompts are list continuations (`[World, Sports, `) stopped at `]`.
//! Example prompts show one `Label:`/`Example:` pair per closed class and end
//! with the novel label and an open `Example:` slot, stopped at `\nLabel:`.

pub mod backend;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{normalize_label, LabeledExample, NoveltySource, OpenSetSplit, Origin};
use crate::seeded_rng;

pub use backend::{
    complete_with_retry, truncate_at_stop, BackendError, CachedBackend, Completion,
    CompletionBackend, CompletionRequest, HttpBackend, MockBackend, RetryPolicy, Usage,
};

pub const LABEL_STOP: &str = "]";
pub const EXAMPLE_STOP: &str = "\nLabel:";
pub const FEWSHOT_STOP: &str = "\n\n";
pub const DEFAULT_LABEL_INSTRUCTION: &str = "Generate a diverse list of news genres:";
pub const DEFAULT_EXAMPLE_INSTRUCTION: &str = "Given a label, generate a corresponding example:";
pub const DEFAULT_FEWSHOT_INSTRUCTION: &str = "Generate a diverse list of news articles:";

#[derive(Debug, Error)]
pub enum NoveltyError {
    #[error("at least one closed label is required")]
    NoClosedLabels,
    #[error("at least one demonstration is required")]
    NoDemonstrations,
    #[error("duplicate demonstration label {0:?}")]
    DuplicateDemonstration(String),
    #[error("no training example for closed class {0:?}")]
    MissingClass(String),
    #[error("novel label must be non-empty")]
    EmptyNovelLabel,
    #[error("novel label set is empty")]
    EmptyLabelSet,
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
    #[error("backend failed on iteration {iteration}: {source}")]
    Backend {
        iteration: usize,
        #[source]
        source: BackendError,
    },
    #[error("attempt cap reached: {accepted} of {quota} accepted after {attempts} attempts")]
    AttemptCap {
        quota: usize,
        accepted: usize,
        attempts: usize,
        partial: Box<NoveltySet>,
    },
    #[error("thesaurus: {0}")]
    Thesaurus(String),
    #[error("novelty file {path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `"sci/tech"` becomes `"Sci/Tech"`; words split on spaces, `-` and `/`.
pub fn title_case(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut start = true;
    for c in label.chars() {
        if start {
            out.extend(c.to_uppercase());
        } else {
            out.push(c);
        }
        start = matches!(c, ' ' | '-' | '/');
    }
    out
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPrompt {
    pub instruction: String,
    pub closed_labels: Vec<String>,
    pub rendered: String,
}

/// Renders `instruction\n[A, B, ` with labels kept exactly as given.
pub fn build_label_prompt(
    instruction: &str,
    closed_labels: &[String],
) -> Result<LabelPrompt, NoveltyError> {
    if closed_labels.is_empty() {
        return Err(NoveltyError::NoClosedLabels);
    }
    let mut rendered = String::new();
    if !instruction.is_empty() {
        rendered.push_str(instruction);
        rendered.push('\n');
    }
    rendered.push('[');
    rendered.push_str(&closed_labels.join(", "));
    rendered.push_str(", ");
    Ok(LabelPrompt {
        instruction: instruction.to_string(),
        closed_labels: closed_labels.to_vec(),
        rendered,
    })
}

fn label_chars_ok(s: &str) -> bool {
    s.chars()
        .all(|c| c.is_alphanumeric() || matches!(c, ' ' | '-' | '/'))
}

/// One comma-separated piece of a label completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCandidate {
    pub raw: String,
    pub label: String,
    pub punctuation_ok: bool,
}

/// Every non-empty piece of the completion, including ones that fail the
/// character rule.
pub fn parse_label_candidates(completion: &str) -> Vec<ParsedCandidate> {
    let body = completion.split(LABEL_STOP).next().unwrap_or("");
    body.split(',')
        .filter_map(|piece| {
            let label = normalize_label(piece);
            if label.is_empty() {
                return None;
            }
            Some(ParsedCandidate {
                raw: piece.trim().to_string(),
                punctuation_ok: label_chars_ok(&label),
                label,
            })
        })
        .collect()
}

pub fn parse_label_completion(completion: &str) -> Vec<String> {
    parse_label_candidates(completion)
        .into_iter()
        .filter(|c| c.punctuation_ok)
        .map(|c| c.label)
        .collect()
}

/// Synonym lookup over normalized words, symmetric by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Thesaurus {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl Thesaurus {
    pub fn from_pairs<I, K, V>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, Vec<V>)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut t = Self::default();
        for (word, syns) in entries {
            let a = normalize_label(word.as_ref());
            for s in syns {
                let b = normalize_label(s.as_ref());
                if a.is_empty() || b.is_empty() || a == b {
                    continue;
                }
                t.map.entry(a.clone()).or_default().insert(b.clone());
                t.map.entry(b).or_default().insert(a.clone());
            }
        }
        t
    }

    /// Reads a JSON object mapping each word to an array of synonyms.
    pub fn load(path: &Path) -> Result<Self, NoveltyError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| NoveltyError::Thesaurus(format!("{}: {e}", path.display())))?;
        let parsed: BTreeMap<String, Vec<String>> = serde_json::from_str(&raw)
            .map_err(|e| NoveltyError::Thesaurus(format!("{}: {e}", path.display())))?;
        Ok(Self::from_pairs(parsed))
    }

    pub fn synonyms(&self, word: &str) -> Option<&BTreeSet<String>> {
        self.map.get(word)
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.map.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Why a label candidate was kept or dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum LabelVerdict {
    Accepted,
    Punctuation,
    ClosedSet,
    Gold,
    Synonym { of: String },
    Duplicate,
}

impl LabelVerdict {
    pub fn name(&self) -> &'static str {
        match self {
            LabelVerdict::Accepted => "accepted",
            LabelVerdict::Punctuation => "punctuation",
            LabelVerdict::ClosedSet => "closed_set",
            LabelVerdict::Gold => "gold",
            LabelVerdict::Synonym { .. } => "synonym",
            LabelVerdict::Duplicate => "duplicate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub raw: String,
    pub label: String,
    pub iteration: usize,
    #[serde(flatten)]
    pub verdict: LabelVerdict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NovelLabelSet {
    pub labels: Vec<String>,
    pub provenance: Vec<LabelRecord>,
}

impl NovelLabelSet {
    /// A set taken as given, e.g. the true held-out labels.
    pub fn from_labels<I: IntoIterator<Item = S>, S: AsRef<str>>(labels: I) -> Self {
        let mut set = Self::default();
        for raw in labels {
            let label = normalize_label(raw.as_ref());
            let verdict = if set.labels.contains(&label) {
                LabelVerdict::Duplicate
            } else {
                set.labels.push(label.clone());
                LabelVerdict::Accepted
            };
            set.provenance.push(LabelRecord {
                raw: raw.as_ref().to_string(),
                label,
                iteration: 0,
                verdict,
            });
        }
        set
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Candidates per verdict name.
    pub fn verdict_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for r in &self.provenance {
            *out.entry(r.verdict.name()).or_insert(0) += 1;
        }
        out
    }

    /// Fraction of all candidates removed for the verdict named `name`.
    pub fn removal_fraction(&self, name: &str) -> f64 {
        if self.provenance.is_empty() {
            return 0.0;
        }
        let n = self
            .provenance
            .iter()
            .filter(|r| r.verdict.name() == name)
            .count();
        n as f64 / self.provenance.len() as f64
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)
    }

    pub fn read_json(path: &Path) -> Result<Self, NoveltyError> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| NoveltyError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub retry: RetryPolicy,
}

impl SamplingParams {
    pub fn labels() -> Self {
        Self {
            max_tokens: 64,
            temperature: 1.0,
            retry: RetryPolicy::default(),
        }
    }

    pub fn examples() -> Self {
        Self {
            max_tokens: 128,
            temperature: 0.7,
            retry: RetryPolicy::default(),
        }
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::examples()
    }
}

/// Classifies one normalized candidate against the filters, in order.
fn label_verdict(
    label: &str,
    closed: &[String],
    gold: &BTreeSet<String>,
    thesaurus: &Thesaurus,
    accepted: &[String],
) -> LabelVerdict {
    if closed.iter().any(|c| c == label) {
        return LabelVerdict::ClosedSet;
    }
    if gold.contains(label) {
        return LabelVerdict::Gold;
    }
    if let Some(c) = closed.iter().find(|c| thesaurus.are_synonyms(c, label)) {
        return LabelVerdict::Synonym { of: c.clone() };
    }
    if accepted.iter().any(|a| a == label) {
        return LabelVerdict::Duplicate;
    }
    LabelVerdict::Accepted
}

/// Runs the label prompt `iterations` times with seeds `seed, seed+1, ...`
/// and keeps the union of candidates that survive every filter.
#[allow(clippy::too_many_arguments)]
pub fn generate_label_set<B: CompletionBackend + ?Sized>(
    backend: &B,
    instruction: &str,
    closed_labels: &[String],
    gold_labels: &[String],
    thesaurus: &Thesaurus,
    iterations: usize,
    seed: u64,
    params: SamplingParams,
) -> Result<NovelLabelSet, NoveltyError> {
    if iterations == 0 {
        return Err(NoveltyError::NonPositive("iterations"));
    }
    let prompt = build_label_prompt(instruction, closed_labels)?;
    let closed: Vec<String> = closed_labels.iter().map(|l| normalize_label(l)).collect();
    let gold: BTreeSet<String> = gold_labels.iter().map(|l| normalize_label(l)).collect();
    let mut set = NovelLabelSet::default();
    for iteration in 0..iterations {
        let request = CompletionRequest {
            prompt: prompt.rendered.clone(),
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            stop: vec![LABEL_STOP.to_string()],
            seed: seed.wrapping_add(iteration as u64),
        };
        let completion = complete_with_retry(backend, &request, params.retry)
            .map_err(|source| NoveltyError::Backend { iteration, source })?;
        for cand in parse_label_candidates(&completion.text) {
            let verdict = if cand.punctuation_ok {
                label_verdict(&cand.label, &closed, &gold, thesaurus, &set.labels)
            } else {
                LabelVerdict::Punctuation
            };
            if verdict == LabelVerdict::Accepted {
                set.labels.push(cand.label.clone());
            }
            set.provenance.push(LabelRecord {
                raw: cand.raw,
                label: cand.label,
                iteration,
                verdict,
            });
        }
    }
    Ok(set)
}

/// Instruction, one `Label:`/`Example:` block per demonstration, then the
/// novel label with an empty example slot.
pub fn build_example_prompt(
    instruction: &str,
    demonstrations: &[(String, String)],
    novel_label: &str,
) -> Result<String, NoveltyError> {
    if demonstrations.is_empty() {
        return Err(NoveltyError::NoDemonstrations);
    }
    if novel_label.trim().is_empty() {
        return Err(NoveltyError::EmptyNovelLabel);
    }
    let mut seen = BTreeSet::new();
    let mut out = String::new();
    if !instruction.is_empty() {
        out.push_str(instruction);
        out.push('\n');
    }
    for (label, text) in demonstrations {
        if !seen.insert(label.as_str()) {
            return Err(NoveltyError::DuplicateDemonstration(label.clone()));
        }
        out.push_str(&format!("Label: {label}\nExample: {text}\n\n"));
    }
    out.push_str(&format!("Label: {novel_label}\nExample:"));
    Ok(out)
}

/// Instruction followed by one unlabeled block per demonstration; just the
/// instruction when `zero_shot`.
pub fn build_fewshot_prompt(instruction: &str, demonstrations: &[String], zero_shot: bool) -> String {
    if zero_shot {
        return instruction.to_string();
    }
    let mut out = instruction.to_string();
    out.push('\n');
    for d in demonstrations {
        out.push_str(d);
        out.push_str("\n\n");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationVerdict {
    Accepted,
    Empty,
    FilterRejected,
}

/// One line of a novelty-set file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub label: String,
    pub text: String,
    pub prompt_hash: String,
    pub attempt: usize,
    pub verdict: GenerationVerdict,
}

/// Accepted generations in attempt order, plus every rejection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoveltySet {
    pub items: Vec<GenerationRecord>,
    pub rejected: Vec<GenerationRecord>,
    pub backend: String,
    pub attempts: usize,
}

impl NoveltySet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_examples(&self) -> Vec<LabeledExample> {
        records_to_examples(&self.items)
    }

    pub fn to_source(&self) -> NoveltySource {
        NoveltySource::generated(self.to_examples())
    }

    pub fn write_items(&self, path: &Path) -> std::io::Result<()> {
        write_records(path, &self.items)
    }

    pub fn write_rejections(&self, path: &Path) -> std::io::Result<()> {
        write_records(path, &self.rejected)
    }
}

pub fn records_to_examples(records: &[GenerationRecord]) -> Vec<LabeledExample> {
    records
        .iter()
        .filter(|r| r.verdict == GenerationVerdict::Accepted)
        .filter_map(|r| {
            LabeledExample::new(
                format!("gen:{}", r.attempt),
                r.text.clone(),
                &r.label,
                Origin::Generated,
            )
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>, NoveltyError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| NoveltyError::File {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Predicate applied to trimmed completions; `false` rejects.
pub type FormatFilter<'a> = &'a (dyn Fn(&str) -> bool + Sync);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExampleGenOptions {
    pub instruction: String,
    pub params: SamplingParams,
    /// Attempts allowed per requested item before giving up.
    pub attempt_cap_factor: usize,
    /// Backend requests in flight at once.
    pub concurrency: usize,
}

impl Default for ExampleGenOptions {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_EXAMPLE_INSTRUCTION.to_string(),
            params: SamplingParams::examples(),
            attempt_cap_factor: 10,
            concurrency: 1,
        }
    }
}

/// Closed-class training pools in `split.closed_labels` order.
fn class_pools(split: &OpenSetSplit) -> Result<Vec<(String, Vec<&LabeledExample>)>, NoveltyError> {
    if split.closed_labels.is_empty() {
        return Err(NoveltyError::NoClosedLabels);
    }
    split
        .closed_labels
        .iter()
        .map(|label| {
            let pool: Vec<&LabeledExample> =
                split.train.iter().filter(|e| &e.label == label).collect();
            if pool.is_empty() {
                Err(NoveltyError::MissingClass(label.clone()))
            } else {
                Ok((label.clone(), pool))
            }
        })
        .collect()
}

struct Attempt {
    label: String,
    prompt: String,
    stop: &'static str,
    seed: u64,
}

fn run_attempts<B, F>(
    backend: &B,
    quota: usize,
    options: &ExampleGenOptions,
    filter: Option<FormatFilter<'_>>,
    make: F,
) -> Result<NoveltySet, NoveltyError>
where
    B: CompletionBackend + ?Sized,
    F: Fn(usize) -> Attempt + Sync,
{
    if quota == 0 {
        return Err(NoveltyError::NonPositive("quota"));
    }
    let cap = quota.saturating_mul(options.attempt_cap_factor.max(1));
    let width = options.concurrency.max(1);
    let mut set = NoveltySet {
        backend: backend.fingerprint(),
        ..Default::default()
    };
    let mut next = 0;
    while set.items.len() < quota && next < cap {
        let end = (next + width).min(cap);
        let results: Vec<(usize, Attempt, Result<Completion, BackendError>)> = (next..end)
            .into_par_iter()
            .map(|i| {
                let a = make(i);
                let request = CompletionRequest {
                    prompt: a.prompt.clone(),
                    max_tokens: options.params.max_tokens,
                    temperature: options.params.temperature,
                    stop: vec![a.stop.to_string()],
                    seed: a.seed,
                };
                let r = complete_with_retry(backend, &request, options.params.retry);
                (i, a, r)
            })
            .collect();
        for (i, a, result) in results {
            if set.items.len() == quota {
                break;
            }
            let completion =
                result.map_err(|source| NoveltyError::Backend { iteration: i, source })?;
            let text = truncate_at_stop(&completion.text, &[a.stop.to_string()])
                .trim()
                .to_string();
            let verdict = if text.is_empty() {
                GenerationVerdict::Empty
            } else if filter.is_some_and(|f| !f(&text)) {
                GenerationVerdict::FilterRejected
            } else {
                GenerationVerdict::Accepted
            };
            let record = GenerationRecord {
                label: a.label,
                text,
                prompt_hash: prompt_hash(&a.prompt),
                attempt: i,
                verdict,
            };
            set.attempts = i + 1;
            if verdict == GenerationVerdict::Accepted {
                set.items.push(record);
            } else {
                set.rejected.push(record);
            }
        }
        next = end;
    }
    if set.items.len() < quota {
        return Err(NoveltyError::AttemptCap {
            quota,
            accepted: set.items.len(),
            attempts: set.attempts,
            partial: Box::new(set),
        });
    }
    Ok(set)
}

/// Generates `quota` accepted examples of labels from `label_set`, drawing a
/// fresh novel label and a fresh demonstration per closed class for every
/// attempt. Attempt `i` depends only on `(seed, i)`, so the result does not
/// depend on `options.concurrency`.
pub fn generate_novel_examples<B: CompletionBackend + ?Sized>(
    backend: &B,
    split: &OpenSetSplit,
    label_set: &NovelLabelSet,
    quota: usize,
    seed: u64,
    format_filter: Option<FormatFilter<'_>>,
    options: &ExampleGenOptions,
) -> Result<NoveltySet, NoveltyError> {
    if label_set.is_empty() {
        return Err(NoveltyError::EmptyLabelSet);
    }
    let pools = class_pools(split)?;
    run_attempts(backend, quota, options, format_filter, |i| {
        let mut rng = seeded_rng(seed, &format!("novel-example:{i}"));
        let label = label_set.labels.choose(&mut rng).cloned().unwrap_or_default();
        let demos: Vec<(String, String)> = pools
            .iter()
            .map(|(l, pool)| (l.clone(), pool[rng.gen_range(0..pool.len())].text.clone()))
            .collect();
        // demonstrations are non-empty and distinct, the label is non-empty
        let prompt = build_example_prompt(&options.instruction, &demos, &label)
            .unwrap_or_default();
        Attempt {
            label,
            prompt,
            stop: EXAMPLE_STOP,
            seed: rng.gen(),
        }
    })
}

/// Few-shot (one unlabeled demonstration per closed class) or zero-shot
/// generation. Items carry the `unknown` label since no label is prompted.
pub fn generate_fewshot_examples<B: CompletionBackend + ?Sized>(
    backend: &B,
    split: &OpenSetSplit,
    quota: usize,
    seed: u64,
    zero_shot: bool,
    format_filter: Option<FormatFilter<'_>>,
    options: &ExampleGenOptions,
) -> Result<NoveltySet, NoveltyError> {
    let pools = if zero_shot { Vec::new() } else { class_pools(split)? };
    run_attempts(backend, quota, options, format_filter, |i| {
        let mut rng = seeded_rng(seed, &format!("fewshot-example:{i}"));
        let demos: Vec<String> = pools
            .iter()
            .map(|(_, pool)| pool[rng.gen_range(0..pool.len())].text.clone())
            .collect();
        Attempt {
            label: UNLABELED.to_string(),
            prompt: build_fewshot_prompt(&options.instruction, &demos, zero_shot),
            stop: FEWSHOT_STOP,
            seed: rng.gen(),
        }
    })
}

pub const UNLABELED: &str = "unknown";
