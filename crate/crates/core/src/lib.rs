//! Open-set selective text classification.
//!
//! The pipeline has four stages, one module each:
//!
//! - [`corpus`]: load labeled text, hold out classes to form open-set splits,
//!   and assemble auxiliary novel sets.
//! - [`novelty`]: prompt a completion backend for novel labels and then for
//!   examples of those labels, filtering both.
//! - [`classifier`]: a softmax linear model over hashed n-gram features
//!   ([`featurize`]) trained with cross-entropy, the contrastive confidence
//!   loss, outlier exposure or label smoothing.
//! - [`eval`]: MaxProb scoring, accuracy-coverage curves, AUAC, AUROC and the
//!   sweep harnesses built on them.
//!
//! [`synth`] generates keyword-topic corpora used by the examples and tests.

pub mod classifier;
pub mod corpus;
pub mod eval;
pub mod featurize;
pub mod novelty;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG for one named purpose. Different `domain`s with the same seed give
/// independent streams.
pub fn seeded_rng(seed: u64, domain: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(xxhash_rust::xxh64::xxh64(domain.as_bytes(), seed))
}
