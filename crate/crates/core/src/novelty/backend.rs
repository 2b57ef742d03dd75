//! Text-completion backends.
//!
//! A backend maps a [`CompletionRequest`] to a completion string. Three
//! implementations are provided: [`MockBackend`] (pure, offline),
//! [`HttpBackend`] (an OpenAI-compatible `/v1/completions` endpoint) and
//! [`CachedBackend`], which stores completions on disk keyed by a SHA-256 of
//! the backend fingerprint and every request field.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::featurize::tokenize;
use crate::seeded_rng;

pub const DEFAULT_TOKEN_ENV: &str = "CONAL_API_KEY";
pub const DEFAULT_COMPLETIONS_PATH: &str = "/v1/completions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::RateLimited { .. } => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;

    /// Identifies the endpoint and model; part of every cache key.
    fn fingerprint(&self) -> String;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
        }
    }
}

/// Calls the backend, retrying retryable failures with exponential backoff.
/// A rate-limit response with a retry-after hint waits that long instead.
pub fn complete_with_retry<B: CompletionBackend + ?Sized>(
    backend: &B,
    request: &CompletionRequest,
    policy: RetryPolicy,
) -> Result<Completion, BackendError> {
    let mut attempt = 0;
    loop {
        match backend.complete(request) {
            Ok(c) => return Ok(c),
            Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                let backoff = Duration::from_millis(policy.base_delay_ms.saturating_mul(1 << attempt));
                let wait = match &e {
                    BackendError::RateLimited {
                        retry_after: Some(d),
                    } => *d,
                    _ => backoff,
                };
                std::thread::sleep(wait);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Truncates `text` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

/// Offline backend whose output is a pure function of (prompt, seed).
///
/// - Requests stopping at `"]"` are answered with a comma-separated run of
///   labels drawn from `label_pool`, closed by `"]"`.
/// - Prompts ending in `Example:` get `" example about <label>"` followed by
///   `example_words` words drawn from the prompt's demonstrations.
/// - Anything else gets `example_words` words drawn from the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MockBackend {
    pub label_pool: Vec<String>,
    pub labels_per_completion: usize,
    pub example_words: usize,
}

impl Default for MockBackend {
    fn default() -> Self {
        let pool = [
            "Politics",
            "Entertainment",
            "Health",
            "Technology",
            "Travel",
            "Science",
            "Education",
            "Weather",
            "Crime",
            "Business",
            "Sports",
        ];
        Self {
            label_pool: pool.iter().map(|s| s.to_string()).collect(),
            labels_per_completion: 4,
            example_words: 6,
        }
    }
}

impl MockBackend {
    pub fn with_labels<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        Self {
            label_pool: labels.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    fn words_from(source: &str, count: usize, rng: &mut impl Rng) -> Vec<String> {
        let vocab = tokenize(source);
        if vocab.is_empty() {
            return Vec::new();
        }
        (0..count)
            .filter_map(|_| vocab.choose(rng).cloned())
            .collect()
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let mut rng = seeded_rng(request.seed, &request.prompt);
        let raw = if request.stop.iter().any(|s| s == "]") {
            let picks: Vec<&str> = (0..self.labels_per_completion)
                .filter_map(|_| self.label_pool.choose(&mut rng).map(String::as_str))
                .collect();
            format!("{}]", picks.join(", "))
        } else if request.prompt.trim_end().ends_with("Example:") {
            let label = request
                .prompt
                .lines()
                .rev()
                .find_map(|l| l.strip_prefix("Label: "))
                .unwrap_or("")
                .trim()
                .to_string();
            let demos: String = request
                .prompt
                .lines()
                .filter_map(|l| l.strip_prefix("Example: "))
                .collect::<Vec<_>>()
                .join(" ");
            let mut text = format!(" example about {label}");
            for w in Self::words_from(&demos, self.example_words, &mut rng) {
                text.push(' ');
                text.push_str(&w);
            }
            text.push_str("\nLabel: ");
            text
        } else {
            let words = Self::words_from(&request.prompt, self.example_words, &mut rng);
            format!(" {}\n\n", words.join(" "))
        };
        let text = truncate_at_stop(&raw, &request.stop).to_string();
        Ok(Completion {
            usage: Usage {
                prompt_tokens: tokenize(&request.prompt).len() as u64,
                completion_tokens: tokenize(&text).len() as u64,
            },
            text,
        })
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.label_pool.join("\u{1f}").as_bytes());
        h.update(self.labels_per_completion.to_le_bytes());
        h.update(self.example_words.to_le_bytes());
        format!("mock:{}", &hex::encode(h.finalize())[..16])
    }
}

/// OpenAI-compatible text-completions client.
pub struct HttpBackend {
    base_url: String,
    path: String,
    model: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
    seed: u64,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

impl HttpBackend {
    pub fn new(base_url: &str, model: &str, token: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            path: DEFAULT_COMPLETIONS_PATH.to_string(),
            model: model.to_string(),
            token,
            client,
        })
    }

    /// Reads the bearer token from environment variable `token_env`.
    pub fn from_env(base_url: &str, model: &str, token_env: &str) -> Result<Self, BackendError> {
        Self::new(base_url, model, std::env::var(token_env).ok())
    }

    pub fn with_path(mut self, path: &str) -> Self {
        self.path = path.to_string();
        self
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.base_url, self.path)
    }
}

fn parse_retry_after(value: &str) -> Option<Duration> {
    value.trim().parse::<f64>().ok().filter(|s| *s >= 0.0).map(Duration::from_secs_f64)
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let body = WireRequest {
            model: &self.model,
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            stop: &request.stop,
            seed: request.seed,
        };
        let mut req = self.client.post(self.url()).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(parse_retry_after);
            return Err(BackendError::RateLimited { retry_after });
        }
        let text = resp
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let first = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Malformed("no choices".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(Completion {
            text: first.text,
            usage,
        })
    }

    fn fingerprint(&self) -> String {
        format!("http:{}:{}", self.url(), self.model)
    }
}

/// On-disk completion cache wrapped around another backend.
///
/// Entries are written to a temporary file and renamed into place, so
/// concurrent readers only ever see complete entries.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    backend: String,
    request: CompletionRequest,
    completion: Completion,
}

impl<B: CompletionBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn cache_key(&self, request: &CompletionRequest) -> String {
        let material = serde_json::json!({
            "backend": self.inner.fingerprint(),
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "stop": request.stop,
            "seed": request.seed,
        });
        hex::encode(Sha256::digest(material.to_string().as_bytes()))
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn read_entry(path: &Path) -> Option<Completion> {
        let raw = std::fs::read(path).ok()?;
        serde_json::from_slice::<CacheEntry>(&raw)
            .ok()
            .map(|e| e.completion)
    }

    fn write_entry(&self, path: &Path, entry: &CacheEntry) -> Result<(), BackendError> {
        let cache_err = |e: std::io::Error| BackendError::Cache(e.to_string());
        let parent = path.parent().unwrap_or(&self.dir);
        std::fs::create_dir_all(parent).map_err(cache_err)?;
        let mut tmp = tempfile_in(parent).map_err(cache_err)?;
        serde_json::to_writer(&mut tmp.1, entry).map_err(|e| BackendError::Cache(e.to_string()))?;
        drop(tmp.1);
        std::fs::rename(&tmp.0, path).map_err(cache_err)
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, std::fs::File)> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
    let file = std::fs::File::create(&path)?;
    Ok((path, file))
}

impl<B: CompletionBackend> CompletionBackend for CachedBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let key = self.cache_key(request);
        let path = self.entry_path(&key);
        if let Some(c) = Self::read_entry(&path) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(c);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let completion = self.inner.complete(request)?;
        let entry = CacheEntry {
            key,
            backend: self.inner.fingerprint(),
            request: request.clone(),
            completion,
        };
        self.write_entry(&path, &entry)?;
        Ok(entry.completion)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}
