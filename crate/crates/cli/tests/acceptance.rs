//! Acceptance gate. Each test prints one `PASS`/`FAIL` line and fails when
//! its criterion is not met. Tolerances and budgets are pinned below.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use conal::classifier::{
    batch_loss, ClassifierState, IdSample, LossKind, TrainConfig,
};
use conal::corpus::{make_open_set_split, LabeledExample, NoveltySource, OpenSetSplit, Origin};
use conal::eval::sweep::{run_noise_mixture, train_and_evaluate, MixturePools, NoiseSweep};
use conal::eval::{auac, auroc, EvalReport, ScoredExample};
use conal::featurize::{FeatureConfig, SparseVector};
use conal::novelty::{
    build_label_prompt, generate_label_set, BackendError, Completion, CompletionBackend,
    CompletionRequest, LabelVerdict, SamplingParams, Thesaurus, Usage,
};
use conal::seeded_rng;
use conal::synth::{generate_topic, SynthConfig};
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_INSTANCES: usize = 20;
/// Instances whose hinge pairs or argmax are this close to a kink are
/// redrawn; finite differences are meaningless across a kink.
const KINK_MARGIN: f64 = 1e-3;
const METRIC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: usize = 100;
const AUROC_GAIN_MIN: f64 = 0.05;
const ACC_BAND: f64 = 0.01;
const CCL_DROP_MAX: f64 = 0.01;
const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(n: u32, name: &str, ok: bool, detail: &str, elapsed: Duration, budget: Duration) {
    let in_budget = elapsed <= budget;
    let pass = ok && in_budget;
    println!(
        "criterion {n} [{name}]: {} ({detail}; {:.2}s of {}s budget)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    assert!(ok, "criterion {n} failed: {detail}");
    assert!(in_budget, "criterion {n} exceeded its time budget");
}

// ---------------------------------------------------------------- criterion 1

fn random_state(rng: &mut impl Rng, k: usize, d: usize) -> ClassifierState {
    let fc = FeatureConfig {
        dimension: d,
        ..Default::default()
    };
    let labels = (0..k).map(|i| format!("c{i}")).collect();
    let mut s = ClassifierState::zeros(fc, labels).unwrap();
    for i in 0..s.parameter_count() {
        s.set_parameter(i, rng.gen_range(-2.0..2.0));
    }
    s
}

fn random_vector(rng: &mut impl Rng, d: usize) -> SparseVector {
    let (mut idx, mut val) = (Vec::new(), Vec::new());
    for i in 0..d {
        if rng.gen_bool(0.6) {
            idx.push(i as u32);
            val.push(rng.gen_range(-1.0..1.0));
        }
    }
    SparseVector::new(idx, val)
}

fn max_prob_and_gap(state: &ClassifierState, x: &SparseVector) -> (f64, f64) {
    let z = state.logits(x);
    let mut sorted = z.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let m = sorted[0];
    let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
    (1.0 / denom, sorted[0] - sorted.get(1).copied().unwrap_or(f64::INFINITY))
}

fn near_kink(state: &ClassifierState, id: &[IdSample<'_>], ood: &[&SparseVector]) -> bool {
    let id_c: Vec<(f64, f64)> = id.iter().map(|(x, _)| max_prob_and_gap(state, x)).collect();
    let ood_c: Vec<(f64, f64)> = ood.iter().map(|x| max_prob_and_gap(state, x)).collect();
    if id_c.iter().chain(&ood_c).any(|&(_, gap)| gap < KINK_MARGIN) {
        return true;
    }
    id_c.iter()
        .any(|(ci, _)| ood_c.iter().any(|(co, _)| (co - ci).abs() < KINK_MARGIN))
}

fn loss_at(state: &ClassifierState, cfg: &TrainConfig, id: &[IdSample<'_>], ood: &[&SparseVector]) -> f64 {
    batch_loss(state, cfg, id, ood).unwrap().0.total
}

#[test]
fn criterion_1_gradient_oracles() {
    let start = Instant::now();
    let mut rng = seeded_rng(1, "acceptance-gradients");
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let losses = [
        TrainConfig { loss: LossKind::Vanilla, ..Default::default() },
        TrainConfig { loss: LossKind::Ccl, lambda: 1.0, ..Default::default() },
        TrainConfig { loss: LossKind::Oe, oe_weight: 1.0, ..Default::default() },
        TrainConfig { loss: LossKind::LabelSmoothing, ls_alpha: 0.1, ..Default::default() },
    ];
    for cfg in &losses {
        let mut done = 0;
        while done < FD_INSTANCES {
            let k = rng.gen_range(2..=5);
            let d = [4usize, 8, 16][rng.gen_range(0..3)];
            let n_id = rng.gen_range(1..=4);
            let n_ood = if cfg.loss.needs_novelty() { rng.gen_range(1..=4) } else { 0 };
            let mut state = random_state(&mut rng, k, d);
            let xs: Vec<SparseVector> = (0..n_id + n_ood).map(|_| random_vector(&mut rng, d)).collect();
            let ys: Vec<usize> = (0..n_id).map(|_| rng.gen_range(0..k)).collect();
            let id: Vec<IdSample<'_>> = (0..n_id).map(|i| (&xs[i], ys[i])).collect();
            let ood: Vec<&SparseVector> = xs[n_id..].iter().collect();
            if cfg.loss == LossKind::Ccl && near_kink(&state, &id, &ood) {
                continue;
            }
            let analytic = batch_loss(&state, cfg, &id, &ood).unwrap().1.to_dense(d);
            let mut numeric = vec![0.0; state.parameter_count()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = state.parameter(i);
                state.set_parameter(i, orig + FD_STEP);
                let up = loss_at(&state, cfg, &id, &ood);
                state.set_parameter(i, orig - FD_STEP);
                let down = loss_at(&state, cfg, &id, &ood);
                state.set_parameter(i, orig);
                *slot = (up - down) / (2.0 * FD_STEP);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
                .max(1e-12);
            let rel = diff / scale;
            worst = worst.max(rel);
            if rel >= FD_REL_TOL {
                failures.push(format!("{} K={k} D={d}: {rel:.2e}", cfg.loss));
            }
            done += 1;
        }
    }
    verdict(
        1,
        "gradient oracles",
        failures.is_empty(),
        &format!("4 losses x {FD_INSTANCES} instances, max rel err {worst:.2e} (< {FD_REL_TOL:e}) {failures:?}"),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

// ------------------------------------------------------------- criteria 2, 3

fn brute_auroc(scored: &[ScoredExample]) -> f64 {
    let ids: Vec<f64> = scored.iter().filter(|s| !s.is_ood).map(|s| s.confidence).collect();
    let oods: Vec<f64> = scored.iter().filter(|s| s.is_ood).map(|s| s.confidence).collect();
    let mut total = 0.0;
    for a in &ids {
        for b in &oods {
            total += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    total / (ids.len() * oods.len()) as f64
}

/// Recomputes every prefix accuracy from scratch by selecting the top-k
/// examples (confidence descending, id ascending) independently for each k.
fn brute_auac(scored: &[ScoredExample]) -> f64 {
    let n = scored.len();
    let before = |a: &ScoredExample, b: &ScoredExample| {
        a.confidence > b.confidence || (a.confidence == b.confidence && a.id < b.id)
    };
    let mut total = 0.0;
    for k in 1..=n {
        let mut correct = 0usize;
        for s in scored {
            let rank = scored.iter().filter(|o| before(o, s)).count();
            if rank < k && s.is_correct {
                correct += 1;
            }
        }
        total += correct as f64 / k as f64;
    }
    total / n as f64
}

fn random_scored(rng: &mut impl Rng) -> Vec<ScoredExample> {
    let n = rng.gen_range(2..=200);
    let quantize = rng.gen_bool(0.5);
    let mut out: Vec<ScoredExample> = (0..n)
        .map(|i| {
            let mut c: f64 = rng.gen();
            if quantize {
                c = (c * 8.0).floor() / 8.0;
            }
            let id = format!("e{i:03}");
            if rng.gen_bool(0.4) {
                ScoredExample::ood_example(id, c)
            } else {
                ScoredExample::id_example(id, c, rng.gen_bool(0.7))
            }
        })
        .collect();
    // both populations present
    out[0] = ScoredExample::id_example("e000", out[0].confidence, true);
    out[1] = ScoredExample::ood_example("e001", out[1].confidence);
    out
}

#[test]
fn criterion_2_metric_oracles() {
    let start = Instant::now();
    let mut rng = seeded_rng(2, "acceptance-metrics");
    let mut worst: f64 = 0.0;
    for _ in 0..METRIC_INSTANCES {
        let s = random_scored(&mut rng);
        worst = worst.max((auroc(&s).unwrap() - brute_auroc(&s)).abs());
        worst = worst.max((auac(&s).unwrap() - brute_auac(&s)).abs());
    }
    verdict(
        2,
        "metric oracles",
        worst < METRIC_TOL,
        &format!("{METRIC_INSTANCES} sets, max |diff| {worst:.1e} (< {METRIC_TOL:e})"),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_3_hand_checked_values() {
    let start = Instant::now();
    let roc = vec![
        ScoredExample::id_example("a", 0.9, true),
        ScoredExample::id_example("b", 0.6, true),
        ScoredExample::ood_example("c", 0.7),
        ScoredExample::ood_example("d", 0.5),
    ];
    let acc = vec![
        ScoredExample::id_example("a", 0.9, true),
        ScoredExample::id_example("b", 0.8, true),
        ScoredExample::id_example("c", 0.7, false),
    ];
    let (r, rb) = (auroc(&roc).unwrap(), brute_auroc(&roc));
    let (a, ab) = (auac(&acc).unwrap(), brute_auac(&acc));
    let ok = (r - 0.75).abs() < METRIC_TOL
        && (rb - 0.75).abs() < METRIC_TOL
        && (a - 8.0 / 9.0).abs() < METRIC_TOL
        && (ab - 8.0 / 9.0).abs() < METRIC_TOL;
    verdict(
        3,
        "hand-checked values",
        ok,
        &format!("AUROC {r} (oracle {rb}), AUAC {a} (oracle {ab})"),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

// ------------------------------------------------------------- criteria 4, 5

/// 2000 train / 500 ID test / 500 OOD test; `politics` is held out.
fn benchmark() -> (SynthConfig, OpenSetSplit) {
    let cfg = SynthConfig::default();
    let corpus: Vec<LabeledExample> = [(0, 834), (1, 833), (2, 833), (3, 500)]
        .into_iter()
        .flat_map(|(t, n)| generate_topic(&cfg, t, n, 0, "bench", Origin::Train))
        .collect();
    let split = make_open_set_split(&corpus, &["politics".to_string()], 0.2, 0).unwrap();
    assert_eq!(
        (split.train.len(), split.id_test.len(), split.ood_test.len()),
        (2000, 500, 500)
    );
    (cfg, split)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_4_synthetic_open_set_benchmark() {
    let start = Instant::now();
    let (cfg, split) = benchmark();
    let gold = NoveltySource::gold_heldout(&generate_topic(&cfg, 3, 2000, 0, "gold", Origin::External));
    let features = FeatureConfig::default();
    let (mut v_roc, mut v_acc, mut c_roc, mut c_acc) = (vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let base = TrainConfig { steps: 2000, seed, ..Default::default() };
        let v = train_and_evaluate(&split, None, &TrainConfig { loss: LossKind::Vanilla, ..base.clone() }, &features).unwrap();
        let c = train_and_evaluate(&split, Some(&gold), &TrainConfig { loss: LossKind::Ccl, ..base }, &features).unwrap();
        v_roc.push(v.auroc.unwrap());
        v_acc.push(v.id_accuracy);
        c_roc.push(c.auroc.unwrap());
        c_acc.push(c.id_accuracy);
    }
    let (vr, va, cr, ca) = (mean(&v_roc), mean(&v_acc), mean(&c_roc), mean(&c_acc));
    verdict(
        4,
        "synthetic open-set benchmark",
        cr >= vr + AUROC_GAIN_MIN && (ca - va).abs() <= ACC_BAND,
        &format!(
            "AUROC vanilla {vr:.4} ccl {cr:.4} (gain >= {AUROC_GAIN_MIN}); ID acc vanilla {va:.4} ccl {ca:.4} (|diff| <= {ACC_BAND})"
        ),
        start.elapsed(),
        Duration::from_secs(120),
    );
}

#[test]
fn criterion_5_noise_mixture_direction() {
    let start = Instant::now();
    let (cfg, full) = benchmark();
    let train_size = 150;
    let split = full.subsample_train(train_size, 0);
    // pools disjoint from train and test
    let ood = generate_topic(&cfg, 3, 4 * train_size, 0, "gold", Origin::External);
    let id: Vec<LabeledExample> = (0..3)
        .flat_map(|t| generate_topic(&cfg, t, 300, 0, "noise", Origin::External))
        .collect();
    let plan = NoiseSweep {
        id_fractions: vec![0.0, 0.75],
        losses: vec![LossKind::Ccl, LossKind::Oe],
        seeds: SEEDS.to_vec(),
        novelty_size: 4 * train_size,
    };
    let base = TrainConfig { learning_rate: 0.5, ..Default::default() };
    let table = run_noise_mixture(
        &split,
        MixturePools { ood: &ood, id: &id },
        &plan,
        &base,
        &FeatureConfig::default(),
    )
    .unwrap();
    let acc = |loss, f| table.mean(loss, f).unwrap().id_accuracy;
    let ccl_drop = acc(LossKind::Ccl, 0.0) - acc(LossKind::Ccl, 0.75);
    let oe_drop = acc(LossKind::Oe, 0.0) - acc(LossKind::Oe, 0.75);
    verdict(
        5,
        "noise-mixture direction",
        oe_drop > ccl_drop && ccl_drop <= CCL_DROP_MAX,
        &format!("ID-acc drop at 0.75: oe {oe_drop:.4}, ccl {ccl_drop:.4} (<= {CCL_DROP_MAX})"),
        start.elapsed(),
        Duration::from_secs(300),
    );
}

// ---------------------------------------------------------------- criterion 6

/// Returns one scripted completion per call, in order.
struct Script(Vec<&'static str>, std::sync::atomic::AtomicUsize);

impl CompletionBackend for Script {
    fn complete(&self, _: &CompletionRequest) -> Result<Completion, BackendError> {
        let i = self.1.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(Completion { text: self.0[i].to_string(), usage: Usage::default() })
    }

    fn fingerprint(&self) -> String {
        "script".into()
    }
}

struct Fixture {
    name: &'static str,
    closed: &'static [&'static str],
    gold: &'static [&'static str],
    thesaurus: &'static [(&'static str, &'static [&'static str])],
    completions: Vec<&'static str>,
    /// (normalized label, verdict name, synonym-of) per candidate in order.
    expected: Vec<(&'static str, &'static str, Option<&'static str>)>,
    accepted: &'static [&'static str],
}

fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            name: "emotions",
            closed: &["Joy", "Anger", "Fear"],
            gold: &["sadness"],
            thesaurus: &[("joy", &["happiness", "delight"])],
            completions: vec!["Happiness, Sadness, Love]", "Surprise, delight, JOY, love]"],
            expected: vec![
                ("happiness", "synonym", Some("joy")),
                ("sadness", "gold", None),
                ("love", "accepted", None),
                ("surprise", "accepted", None),
                ("delight", "synonym", Some("joy")),
                ("joy", "closed_set", None),
                ("love", "duplicate", None),
            ],
            accepted: &["love", "surprise"],
        },
        Fixture {
            name: "news",
            closed: &["World", "Sports", "Sci/Tech"],
            gold: &["Business"],
            thesaurus: &[],
            completions: vec![
                "Health, Sci/Tech, \nGenerate more]",
                "BUSINESS, U.S. News, ??!, , Crime, sports]",
                "Pop-culture, health]",
            ],
            expected: vec![
                ("health", "accepted", None),
                ("sci/tech", "closed_set", None),
                ("generate more", "accepted", None),
                ("business", "gold", None),
                ("u.s. news", "punctuation", None),
                ("??!", "punctuation", None),
                ("crime", "accepted", None),
                ("sports", "closed_set", None),
                ("pop-culture", "accepted", None),
                ("health", "duplicate", None),
            ],
            accepted: &["health", "generate more", "crime", "pop-culture"],
        },
        Fixture {
            name: "symmetric synonyms and case",
            closed: &["Location"],
            gold: &["Person"],
            thesaurus: &[("place", &["location"])],
            completions: vec!["PLACE, pErSoN, Number, number , Organization's]"],
            expected: vec![
                ("place", "synonym", Some("location")),
                ("person", "gold", None),
                ("number", "accepted", None),
                ("number", "duplicate", None),
                ("organization's", "punctuation", None),
            ],
            accepted: &["number"],
        },
        Fixture {
            name: "nothing survives",
            closed: &["Joy"],
            gold: &["sadness"],
            thesaurus: &[("joy", &["happiness"])],
            completions: vec!["Joy, Sadness]", "happiness]"],
            expected: vec![
                ("joy", "closed_set", None),
                ("sadness", "gold", None),
                ("happiness", "synonym", Some("joy")),
            ],
            accepted: &[],
        },
    ]
}

#[test]
fn criterion_6_filter_soundness_fixtures() {
    let start = Instant::now();
    let all = fixtures();
    let mut failed = Vec::new();
    for f in &all {
        let backend = Script(f.completions.clone(), Default::default());
        let thesaurus = Thesaurus::from_pairs(f.thesaurus.iter().map(|(w, s)| (*w, s.to_vec())));
        let closed: Vec<String> = f.closed.iter().map(|s| s.to_string()).collect();
        let gold: Vec<String> = f.gold.iter().map(|s| s.to_string()).collect();
        let set = generate_label_set(
            &backend,
            "Generate a diverse list:",
            &closed,
            &gold,
            &thesaurus,
            f.completions.len(),
            0,
            SamplingParams::labels(),
        )
        .unwrap();
        let got: Vec<(String, &str, Option<String>)> = set
            .provenance
            .iter()
            .map(|r| {
                let of = match &r.verdict {
                    LabelVerdict::Synonym { of } => Some(of.clone()),
                    _ => None,
                };
                (r.label.clone(), r.verdict.name(), of)
            })
            .collect();
        let want: Vec<(String, &str, Option<String>)> = f
            .expected
            .iter()
            .map(|(l, v, o)| (l.to_string(), *v, o.map(str::to_string)))
            .collect();
        let closed_norm: Vec<String> = closed.iter().map(|c| c.to_lowercase()).collect();
        let sound = set.labels.iter().all(|l| {
            !closed_norm.contains(l)
                && !gold.iter().any(|g| g.to_lowercase() == *l)
                && !closed_norm.iter().any(|c| thesaurus.are_synonyms(c, l))
        });
        if got != want || set.labels != f.accepted || !sound {
            failed.push(f.name);
        }
    }
    verdict(
        6,
        "filter soundness fixtures",
        failed.is_empty(),
        &format!("{}/{} fixtures exact, failed {failed:?}", all.len() - failed.len(), all.len()),
        start.elapsed(),
        Duration::from_secs(5),
    );
}

// ---------------------------------------------------------------- criterion 7

fn conal(args: &[&str], cwd: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_conal"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CONAL_CACHE_DIR")
        .output()
        .expect("running conal");
    if !out.status.success() {
        eprintln!("conal {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let steps: [&[&str]; 5] = [
        &["synth", "--out", "data.jsonl", "--docs-per-topic", "300"],
        &["split", "--data", "data.jsonl", "--heldout", "politics", "--out", "split"],
        &["generate", "--split", "split", "--backend", "mock", "--quota", "50", "--out", "gen"],
        &[
            "train", "--split", "split", "--novelty", "gen/novelty.jsonl", "--loss", "ccl",
            "--steps", "500", "--out", "model",
        ],
        &["eval", "--split", "split", "--model", "model/model.json", "--out", "eval"],
    ];
    for args in steps {
        let out = conal(args, dir);
        if out.status.code() != Some(0) {
            return Err(format!("{} exited with {:?}", args[0], out.status.code()));
        }
    }
    let model = std::fs::read(dir.join("model/model.json")).map_err(|e| e.to_string())?;
    let report = std::fs::read(dir.join("eval/report.json")).map_err(|e| e.to_string())?;
    let parsed: EvalReport = serde_json::from_slice(&report).map_err(|e| e.to_string())?;
    parsed.validate()?;
    if parsed.n_id == 0 || parsed.n_ood == 0 || parsed.auroc.is_none() {
        return Err("report lacks a population".into());
    }
    if parsed.curve.len() != parsed.n_id + parsed.n_ood
        || parsed.confidence_profile.len() != parsed.curve.len()
    {
        return Err("curve or profile length mismatch".into());
    }
    let generated = std::fs::read_to_string(dir.join("gen/novelty.jsonl")).map_err(|e| e.to_string())?;
    if generated.lines().count() != 50 {
        return Err("novelty set does not hold 50 items".into());
    }
    Ok((model, report))
}

#[test]
fn criterion_7_offline_end_to_end() {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ok, detail) = match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(ra), Ok(rb)) => {
            let same = ra == rb;
            (same, format!("exit 0 for all steps, well-formed report, byte-identical reruns: {same}"))
        }
        (Err(e), _) | (_, Err(e)) => (false, e),
    };
    verdict(7, "offline end-to-end", ok, &detail, start.elapsed(), Duration::from_secs(60));
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_prompt_conformance() {
    let start = Instant::now();
    let expected = "Generate a diverse list of news genres:\n[World, Sports, Sci/Tech, ";
    let labels: Vec<String> = ["World", "Sports", "Sci/Tech"].iter().map(|s| s.to_string()).collect();
    let p = build_label_prompt("Generate a diverse list of news genres:", &labels).unwrap();
    verdict(
        8,
        "prompt conformance",
        p.rendered == expected,
        &format!("rendered {:?}", p.rendered),
        start.elapsed(),
        Duration::from_secs(5),
    );
}
