//! Keyword-topic corpora for tests and offline demos.
//!
//! Each document of topic `t` is a bag of tokens drawn from `t`'s keywords,
//! from its neighbor topic (if any), from a random other topic, or from a
//! generic filler vocabulary. A held-out topic whose neighbor is a closed
//! class looks superficially like that class, which is what makes the
//! open-set problem non-trivial.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledExample, Origin};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub keywords: Vec<String>,
    /// Index of a topic whose keywords leak into this one.
    pub neighbor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub topics: Vec<Topic>,
    pub filler: Vec<String>,
    pub docs_per_topic: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability a token is one of the document's own topic keywords.
    pub own_rate: f64,
    /// Probability a token comes from the neighbor topic.
    pub neighbor_rate: f64,
    /// Probability a token comes from a uniformly chosen other topic.
    pub confusion_rate: f64,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

impl Default for SynthConfig {
    /// Four news-like topics; `politics` borrows heavily from `world`.
    fn default() -> Self {
        let topics = vec![
            Topic {
                name: "business".into(),
                keywords: words(
                    "market shares profit earnings stocks investor merger revenue quarterly \
                     bank retail prices dividend acquisition startup ceo sales bonds",
                ),
                neighbor: None,
            },
            Topic {
                name: "sports".into(),
                keywords: words(
                    "match season coach league goal striker playoffs championship tournament \
                     stadium score injury squad medal finals pitcher quarterback",
                ),
                neighbor: None,
            },
            Topic {
                name: "world".into(),
                keywords: words(
                    "country border refugees capital troops embassy crisis ceasefire region \
                     officials government foreign protest nation united sanctions",
                ),
                neighbor: None,
            },
            Topic {
                name: "politics".into(),
                keywords: words(
                    "senate ballot campaign senator parliament legislation candidate voters \
                     party caucus referendum lawmakers bill coalition polls governor",
                ),
                neighbor: Some(2),
            },
        ];
        Self {
            topics,
            filler: words(
                "the a of to in and on for with at by from new after over says said report \
                 year week day people first last could would will may more than two three \
                 time today tuesday monday friday early late major top plan amid despite",
            ),
            docs_per_topic: 1000,
            min_tokens: 7,
            max_tokens: 14,
            own_rate: 0.30,
            neighbor_rate: 0.15,
            confusion_rate: 0.08,
        }
    }
}

impl SynthConfig {
    pub fn topic_index(&self, name: &str) -> Option<usize> {
        self.topics.iter().position(|t| t.name == name)
    }
}

/// Generates one document of topic `topic`.
fn document<R: Rng>(cfg: &SynthConfig, topic: usize, rng: &mut R) -> String {
    let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
    let own = &cfg.topics[topic];
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let u: f64 = rng.gen();
        let neighbor_rate = if own.neighbor.is_some() { cfg.neighbor_rate } else { 0.0 };
        let vocab = if u < cfg.own_rate {
            &own.keywords
        } else if u < cfg.own_rate + neighbor_rate {
            &cfg.topics[own.neighbor.unwrap_or(topic)].keywords
        } else if u < cfg.own_rate + neighbor_rate + cfg.confusion_rate && cfg.topics.len() > 1 {
            let mut other = rng.gen_range(0..cfg.topics.len() - 1);
            if other >= topic {
                other += 1;
            }
            &cfg.topics[other].keywords
        } else {
            &cfg.filler
        };
        if let Some(w) = vocab.choose(rng) {
            tokens.push(w.as_str());
        }
    }
    tokens.join(" ")
}

/// `count` documents of one topic with ids `<prefix>:<topic>:<i>`.
pub fn generate_topic(
    cfg: &SynthConfig,
    topic: usize,
    count: usize,
    seed: u64,
    prefix: &str,
    origin: Origin,
) -> Vec<LabeledExample> {
    let mut rng = seeded_rng(seed, &format!("synth:{prefix}:{topic}"));
    let name = &cfg.topics[topic].name;
    (0..count)
        .filter_map(|i| {
            LabeledExample::new(
                format!("{prefix}:{name}:{i}"),
                document(cfg, topic, &mut rng),
                name,
                origin,
            )
        })
        .collect()
}

/// `docs_per_topic` documents for every topic, grouped by topic.
pub fn generate_corpus(cfg: &SynthConfig, seed: u64) -> Vec<LabeledExample> {
    (0..cfg.topics.len())
        .flat_map(|t| generate_topic(cfg, t, cfg.docs_per_topic, seed, "synth", Origin::Train))
        .collect()
}
