//! Run directories: split layout, novelty loading and manifests.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use conal::corpus::{
    load_corpus_as, read_jsonl, write_jsonl, CorpusFormat, NoveltySource, OpenSetSplit, Origin,
};
use conal::novelty::{read_records, records_to_examples};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const SPLIT_META: &str = "split.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const ID_TEST_FILE: &str = "id_test.jsonl";
pub const OOD_TEST_FILE: &str = "ood_test.jsonl";
pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub closed_labels: Vec<String>,
    pub heldout_labels: Vec<String>,
    pub train: usize,
    pub id_test: usize,
    pub ood_test: usize,
}

pub fn save_split(dir: &Path, split: &OpenSetSplit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(TRAIN_FILE), &split.train)?;
    write_jsonl(&dir.join(ID_TEST_FILE), &split.id_test)?;
    write_jsonl(&dir.join(OOD_TEST_FILE), &split.ood_test)?;
    write_pretty_json(
        &dir.join(SPLIT_META),
        &SplitMeta {
            closed_labels: split.closed_labels.clone(),
            heldout_labels: split.heldout_labels.clone(),
            train: split.train.len(),
            id_test: split.id_test.len(),
            ood_test: split.ood_test.len(),
        },
    )
}

pub fn load_split(dir: &Path) -> Result<OpenSetSplit> {
    let meta_path = dir.join(SPLIT_META);
    let meta: SplitMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .with_context(|| format!("reading {}", meta_path.display()))?,
    )
    .with_context(|| format!("parsing {}", meta_path.display()))?;
    let split = OpenSetSplit {
        closed_labels: meta.closed_labels,
        heldout_labels: meta.heldout_labels,
        train: read_jsonl(&dir.join(TRAIN_FILE))?,
        id_test: read_jsonl(&dir.join(ID_TEST_FILE))?,
        ood_test: read_jsonl(&dir.join(OOD_TEST_FILE))?,
    };
    split
        .validate()
        .map_err(|m| anyhow::anyhow!("split {}: {m}", dir.display()))?;
    Ok(split)
}

/// Content hash over the split's files.
pub fn split_fingerprint(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in [SPLIT_META, TRAIN_FILE, ID_TEST_FILE, OOD_TEST_FILE] {
        h.update(file_sha256(&dir.join(f))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn is_generation_file(path: &Path) -> Result<bool> {
    if CorpusFormat::from_path(path) != Some(CorpusFormat::Jsonl) {
        return Ok(false);
    }
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .with_context(|| format!("parsing first record of {}", path.display()))?;
        return Ok(v.get("prompt_hash").is_some());
    }
    Ok(false)
}

/// Reads a novelty-set file, or any labeled corpus used as an external
/// novel set.
pub fn load_novelty(path: &Path) -> Result<NoveltySource> {
    if is_generation_file(path)? {
        return Ok(NoveltySource::generated(records_to_examples(&read_records(path)?)));
    }
    let Some(format) = CorpusFormat::from_path(path) else {
        bail!("cannot infer the format of {}", path.display());
    };
    Ok(NoveltySource::external(load_corpus_as(path, format, Origin::External)?))
}

pub fn load_pool(path: &Path) -> Result<Vec<conal::corpus::LabeledExample>> {
    Ok(load_novelty(path)?.items)
}

/// Written last into every output directory. Holds no timestamps so reruns
/// are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub backend_fingerprints: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            backend_fingerprints: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let hash = if path.is_dir() {
            split_fingerprint(path)?
        } else {
            file_sha256(path)?
        };
        self.inputs.insert(name.to_string(), hash);
        Ok(())
    }

    /// Records files of `dir` by name and writes the manifest there.
    pub fn finish(mut self, dir: &Path, outputs: &[&str]) -> Result<PathBuf> {
        for name in outputs {
            self.outputs
                .insert(name.to_string(), file_sha256(&dir.join(name))?);
        }
        let path = dir.join(MANIFEST);
        write_pretty_json(&path, &self)?;
        Ok(path)
    }
}
