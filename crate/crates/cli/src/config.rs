//! Declarative run configuration. Values come from defaults, then a TOML
//! file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use conal::classifier::TrainConfig;
use conal::corpus::CorpusFormat;
use conal::featurize::FeatureConfig;
use conal::novelty::{
    RetryPolicy, DEFAULT_EXAMPLE_INSTRUCTION, DEFAULT_FEWSHOT_INSTRUCTION, DEFAULT_LABEL_INSTRUCTION,
};
use serde::{Deserialize, Serialize};

pub const CACHE_DIR_ENV: &str = "CONAL_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: Option<CorpusFormat>,
    pub label_map: Option<PathBuf>,
    pub heldout: Vec<String>,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: None,
            label_map: None,
            heldout: Vec::new(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    /// Completion cache directory; falls back to `CONAL_CACHE_DIR`.
    pub cache_dir: Option<PathBuf>,
    pub retries: u32,
    pub retry_base_ms: u64,
    /// Labels the mock backend proposes; its built-in list when empty.
    pub mock_labels: Vec<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        Self {
            kind: BackendKind::Mock,
            base_url: "http://localhost:8000".into(),
            model: "davinci".into(),
            token_env: conal::novelty::backend::DEFAULT_TOKEN_ENV.into(),
            cache_dir: None,
            retries: retry.max_retries,
            retry_base_ms: retry.base_delay_ms,
            mock_labels: Vec::new(),
        }
    }
}

impl BackendConfig {
    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.retries,
            base_delay_ms: self.retry_base_ms,
        }
    }

    pub fn resolved_cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GenerateMode {
    /// Label generation followed by example generation.
    Np,
    Fewshot,
    Zeroshot,
    /// Example generation conditioned on the true held-out labels.
    GoldLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub mode: GenerateMode,
    pub quota: usize,
    pub iterations: usize,
    pub label_instruction: String,
    pub example_instruction: String,
    pub fewshot_instruction: String,
    pub thesaurus: Option<PathBuf>,
    /// Labels removed as gold; the split's held-out labels when absent.
    pub gold_labels: Option<Vec<String>>,
    pub label_temperature: f64,
    pub example_temperature: f64,
    pub label_max_tokens: u32,
    pub example_max_tokens: u32,
    pub attempt_cap_factor: usize,
    pub concurrency: usize,
    /// Accepted generations must have at least this many tokens.
    pub min_tokens: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            mode: GenerateMode::Np,
            quota: 1000,
            iterations: 5,
            label_instruction: DEFAULT_LABEL_INSTRUCTION.into(),
            example_instruction: DEFAULT_EXAMPLE_INSTRUCTION.into(),
            fewshot_instruction: DEFAULT_FEWSHOT_INSTRUCTION.into(),
            thesaurus: None,
            gold_labels: None,
            label_temperature: 1.0,
            example_temperature: 0.7,
            label_max_tokens: 64,
            example_max_tokens: 128,
            attempt_cap_factor: 10,
            concurrency: 4,
            min_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub settings: Vec<f64>,
    pub losses: Vec<conal::classifier::LossKind>,
    /// Mixture size for noise sweeps; the training-set size times four when 0.
    pub novelty_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        use conal::classifier::LossKind;
        Self {
            settings: Vec::new(),
            losses: vec![LossKind::Ccl, LossKind::Oe],
            novelty_size: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub backend: BackendConfig,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            data: DataConfig::default(),
            backend: BackendConfig::default(),
            generate: GenerateConfig::default(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    /// Checks seeds, numeric settings and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        self.train.validate()?;
        self.features.validate()?;
        for p in [&self.data.path, &self.data.label_map, &self.generate.thesaurus]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("referenced file {} does not exist", p.display());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::run::sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}
