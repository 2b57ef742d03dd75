//! Hashed n-gram term-frequency features.
//!
//! Text is lowercased and split on every maximal run of non-alphanumeric
//! characters. Each n-gram (tokens joined by a single U+0020 space) is hashed
//! with XXH64 seeded by `hash_seed`, and the low `log2(dimension)` bits of
//! the hash pick the feature index. Colliding n-grams add up. Counts are then
//! optionally `ln(1 + count)` scaled and L2 normalized.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

pub const DEFAULT_DIMENSION: usize = 1 << 18;
pub const FEATURE_CACHE_FORMAT: &str = "conal-features";
pub const FEATURE_CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("dimension {0} is not a power of two")]
    Dimension(usize),
    #[error("ngram range {0}..={1} is invalid")]
    NgramRange(usize, usize),
    #[error("feature cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TfScaling {
    Raw,
    Log1p,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub dimension: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hash_seed: u64,
    pub tf_scaling: TfScaling,
    pub l2_normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
            ngram_min: 1,
            ngram_max: 2,
            hash_seed: 0,
            tf_scaling: TfScaling::Log1p,
            l2_normalize: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !self.dimension.is_power_of_two() {
            return Err(FeatureError::Dimension(self.dimension));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(FeatureError::NgramRange(self.ngram_min, self.ngram_max));
        }
        Ok(())
    }

    /// Stable identifier of everything that affects feature values.
    pub fn fingerprint(&self) -> String {
        format!(
            "xxh64;dim={};ngram={}..{};seed={};tf={};l2={}",
            self.dimension,
            self.ngram_min,
            self.ngram_max,
            self.hash_seed,
            match self.tf_scaling {
                TfScaling::Raw => "raw",
                TfScaling::Log1p => "log1p",
            },
            self.l2_normalize
        )
    }
}

/// Sparse vector with strictly increasing indices and non-zero finite values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn new(indices: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert_eq!(indices.len(), values.len());
        Self { indices, values }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Largest index plus one, or 0 when empty.
    pub fn min_dimension(&self) -> usize {
        self.indices.last().map_or(0, |&i| i as usize + 1)
    }
}

/// Lowercases and splits on maximal runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn featurize(text: &str, config: &FeatureConfig) -> SparseVector {
    let tokens = tokenize(text);
    let mask = (config.dimension as u64).wrapping_sub(1);
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for n in config.ngram_min..=config.ngram_max {
        if n > tokens.len() {
            break;
        }
        for window in tokens.windows(n) {
            let gram = window.join(" ");
            let idx = (xxh64(gram.as_bytes(), config.hash_seed) & mask) as u32;
            *counts.entry(idx).or_insert(0.0) += 1.0;
        }
    }
    let (indices, mut values): (Vec<u32>, Vec<f64>) = counts
        .into_iter()
        .map(|(i, c)| {
            let v = match config.tf_scaling {
                TfScaling::Raw => c,
                TfScaling::Log1p => c.ln_1p(),
            };
            (i, v)
        })
        .unzip();
    if config.l2_normalize {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
    }
    SparseVector { indices, values }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    fingerprint: String,
    config: FeatureConfig,
}

#[derive(Serialize, Deserialize)]
struct CacheRow {
    id: String,
    indices: Vec<u32>,
    values: Vec<f64>,
}

/// Writes a feature cache: a JSONL header line followed by one
/// `{"id","indices","values"}` row per vector.
pub fn write_feature_cache<'a, I>(
    path: &Path,
    config: &FeatureConfig,
    rows: I,
) -> Result<(), FeatureError>
where
    I: IntoIterator<Item = (&'a str, &'a SparseVector)>,
{
    let mut w = BufWriter::new(File::create(path)?);
    let header = CacheHeader {
        format: FEATURE_CACHE_FORMAT.into(),
        version: FEATURE_CACHE_VERSION,
        fingerprint: config.fingerprint(),
        config: config.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| FeatureError::Cache(e.to_string()))?;
    w.write_all(b"\n")?;
    for (id, v) in rows {
        let row = CacheRow {
            id: id.to_owned(),
            indices: v.indices.clone(),
            values: v.values.clone(),
        };
        serde_json::to_writer(&mut w, &row).map_err(|e| FeatureError::Cache(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature cache, refusing files built with a different config.
pub fn read_feature_cache(
    path: &Path,
    expected: &FeatureConfig,
) -> Result<Vec<(String, SparseVector)>, FeatureError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| FeatureError::Cache("missing header".into()))??;
    let header: CacheHeader =
        serde_json::from_str(&header_line).map_err(|e| FeatureError::Cache(e.to_string()))?;
    if header.format != FEATURE_CACHE_FORMAT || header.version != FEATURE_CACHE_VERSION {
        return Err(FeatureError::Cache(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    if header.fingerprint != expected.fingerprint() {
        return Err(FeatureError::Cache(format!(
            "fingerprint mismatch: file {} vs expected {}",
            header.fingerprint,
            expected.fingerprint()
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CacheRow =
            serde_json::from_str(&line).map_err(|e| FeatureError::Cache(e.to_string()))?;
        out.push((row.id, SparseVector::new(row.indices, row.values)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Afghan warlords 'threaten poll'"),
            vec!["afghan", "warlords", "threaten", "poll"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("U.S.-led"), vec!["u", "s", "led"]);
    }

    #[test]
    fn empty_text_gives_empty_vector() {
        assert!(featurize("", &FeatureConfig::default()).is_empty());
        assert!(featurize("  ?! ", &FeatureConfig::default()).is_empty());
    }

    #[test]
    fn single_token_is_unit() {
        let v = featurize("hello", &FeatureConfig::default());
        assert_eq!(v.len(), 1);
        assert_eq!(v.values[0], 1.0);
    }

    #[test]
    fn raw_counts_accumulate() {
        let cfg = FeatureConfig {
            ngram_max: 1,
            tf_scaling: TfScaling::Raw,
            l2_normalize: false,
            ..Default::default()
        };
        let v = featurize("spam spam eggs", &cfg);
        let mut vals = v.values.clone();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![1.0, 2.0]);
    }

    #[test]
    fn hash_is_pinned() {
        // XXH64("hello", 0) = 0x26c7827d889f6da3
        let cfg = FeatureConfig::default();
        let v = featurize("hello", &cfg);
        assert_eq!(v.indices[0] as u64, 0x26c7827d889f6da3 & (DEFAULT_DIMENSION as u64 - 1));
    }

    #[test]
    fn config_validation() {
        assert!(FeatureConfig::default().validate().is_ok());
        let bad = FeatureConfig {
            dimension: 1000,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(FeatureError::Dimension(1000))));
        let bad = FeatureConfig {
            ngram_min: 3,
            ngram_max: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cache_roundtrip_and_fingerprint_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let cfg = FeatureConfig::default();
        let v = featurize("the quick brown fox", &cfg);
        write_feature_cache(&path, &cfg, [("x1", &v)]).unwrap();
        let back = read_feature_cache(&path, &cfg).unwrap();
        assert_eq!(back, vec![("x1".to_string(), v)]);
        let other = FeatureConfig {
            hash_seed: 9,
            ..Default::default()
        };
        assert!(read_feature_cache(&path, &other).is_err());
    }

    proptest! {
        #[test]
        fn vectors_are_sorted_finite_unit(text in "\\PC{0,80}", seed in 0u64..4) {
            let cfg = FeatureConfig { hash_seed: seed, dimension: 1 << 10, ..Default::default() };
            let v = featurize(&text, &cfg);
            prop_assert!(v.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(v.values.iter().all(|x| x.is_finite() && *x != 0.0));
            prop_assert!(v.indices.iter().all(|&i| (i as usize) < cfg.dimension));
            if !v.is_empty() {
                prop_assert!((v.norm() - 1.0).abs() < 1e-9);
            }
            prop_assert_eq!(&v, &featurize(&text, &cfg));
        }
    }
}
