use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use conal::classifier::{train, ClassifierState, TrainConfig};
use conal::corpus::{
    load_corpus, make_open_set_split, write_jsonl, CorpusFormat, LabelMap, NoveltySource, Origin,
};
use conal::eval::sweep::{
    run_noise_mixture, run_novelset_size_sweep, run_quota_sweep, run_trainset_size_sweep,
    MixturePools, NoiseSweep, SweepKind, SweepTable,
};
use conal::eval::{export_confidence_profile, score_test_set, write_curve_csv, EvalReport};
use conal::novelty::{
    generate_fewshot_examples, generate_label_set, generate_novel_examples, title_case,
    CachedBackend, CompletionBackend, ExampleGenOptions, HttpBackend, MockBackend, NovelLabelSet,
    NoveltyError, NoveltySet, SamplingParams, Thesaurus,
};
use conal::synth::{generate_topic, SynthConfig};

use crate::config::{BackendKind, GenerateMode, RunConfig};
use crate::run::{self, load_novelty, load_pool, load_split, Manifest};
use crate::{Command, Common, TrainFlags};

pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const PROFILE_FILE: &str = "confidence_profile.csv";
pub const LABELS_FILE: &str = "labels.json";
pub const NOVELTY_FILE: &str = "novelty.jsonl";
pub const REJECTIONS_FILE: &str = "rejections.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            docs_per_topic,
            topics,
            prefix,
            common,
        } => {
            let cfg = load_config(&common)?;
            synth(&out, docs_per_topic, &topics, &prefix, cfg.seed())
        }
        Command::Split {
            data,
            format,
            heldout,
            test_fraction,
            label_map,
            out,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            set(&mut cfg.data.path, data.map(Some));
            set(&mut cfg.data.format, format.map(Some));
            set(&mut cfg.data.heldout, heldout);
            set(&mut cfg.data.test_fraction, test_fraction);
            set(&mut cfg.data.label_map, label_map.map(Some));
            split(&cfg, &out)
        }
        Command::Generate {
            split,
            out,
            mode,
            backend,
            quota,
            iterations,
            thesaurus,
            cache_dir,
            concurrency,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            set(&mut cfg.generate.mode, mode);
            set(&mut cfg.backend.kind, backend);
            set(&mut cfg.generate.quota, quota);
            set(&mut cfg.generate.iterations, iterations);
            set(&mut cfg.generate.thesaurus, thesaurus.map(Some));
            set(&mut cfg.backend.cache_dir, cache_dir.map(Some));
            set(&mut cfg.generate.concurrency, concurrency);
            generate(&cfg, &split, &out)
        }
        Command::Train {
            split,
            novelty,
            out,
            train,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            apply_train_flags(&mut cfg, &train);
            train_cmd(&cfg, &split, novelty.as_deref(), &out)
        }
        Command::Eval {
            split,
            model,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            eval(&cfg, &split, &model, &out)
        }
        Command::Sweep {
            kind,
            split,
            novelty,
            ood_pool,
            id_pool,
            settings,
            losses,
            novelty_size,
            out,
            train,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            apply_train_flags(&mut cfg, &train);
            set(&mut cfg.sweep.settings, settings);
            set(&mut cfg.sweep.losses, losses);
            set(&mut cfg.sweep.novelty_size, novelty_size);
            let inputs = SweepInputs {
                split,
                novelty,
                ood_pool,
                id_pool,
            };
            sweep(&cfg, kind, &inputs, &out)
        }
        Command::Report { runs, out } => report(&runs, out.as_deref()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    set(&mut cfg.seeds, common.seeds.clone());
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    set(&mut cfg.train.loss, f.loss);
    set(&mut cfg.train.steps, f.steps);
    set(&mut cfg.train.batch_n, f.batch_n);
    set(&mut cfg.train.lambda, f.lambda);
    set(&mut cfg.train.oe_weight, f.oe_weight);
    set(&mut cfg.train.ls_alpha, f.ls_alpha);
    set(&mut cfg.train.learning_rate, f.learning_rate);
    set(&mut cfg.features.dimension, f.dimension);
}

fn synth(out: &Path, docs: usize, topics: &[String], prefix: &str, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        docs_per_topic: docs,
        ..Default::default()
    };
    let indices: Vec<usize> = if topics.is_empty() {
        (0..cfg.topics.len()).collect()
    } else {
        topics
            .iter()
            .map(|t| {
                cfg.topic_index(t)
                    .with_context(|| format!("unknown synthetic topic {t:?}"))
            })
            .collect::<Result<_>>()?
    };
    let examples: Vec<_> = indices
        .into_iter()
        .flat_map(|t| generate_topic(&cfg, t, docs, seed, prefix, Origin::Train))
        .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_jsonl(out, &examples).with_context(|| format!("writing {}", out.display()))
}

fn split(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let Some(path) = &cfg.data.path else {
        bail!("no dataset given (--data or data.path)");
    };
    let format = match cfg.data.format {
        Some(f) => f,
        None => CorpusFormat::from_path(path)
            .with_context(|| format!("cannot infer the format of {}", path.display()))?,
    };
    let mut corpus = load_corpus(path, format)?;
    if let Some(map) = &cfg.data.label_map {
        LabelMap::load(map)?.apply_all(&mut corpus);
    }
    if cfg.data.heldout.is_empty() {
        bail!("no held-out labels given (--heldout or data.heldout)");
    }
    let split = make_open_set_split(&corpus, &cfg.data.heldout, cfg.data.test_fraction, cfg.seed())?;
    run::save_split(out, &split)?;
    let mut manifest = Manifest::new("split", cfg);
    manifest.input("data", path)?;
    manifest.finish(
        out,
        &[run::SPLIT_META, run::TRAIN_FILE, run::ID_TEST_FILE, run::OOD_TEST_FILE],
    )?;
    println!(
        "split: {} train, {} id_test, {} ood_test -> {}",
        split.train.len(),
        split.id_test.len(),
        split.ood_test.len(),
        out.display()
    );
    Ok(())
}

fn make_backend(cfg: &RunConfig) -> Result<Box<dyn CompletionBackend>> {
    let base: Box<dyn CompletionBackend> = match cfg.backend.kind {
        BackendKind::Mock => Box::new(if cfg.backend.mock_labels.is_empty() {
            MockBackend::default()
        } else {
            MockBackend::with_labels(cfg.backend.mock_labels.iter().cloned())
        }),
        BackendKind::Http => Box::new(HttpBackend::from_env(
            &cfg.backend.base_url,
            &cfg.backend.model,
            &cfg.backend.token_env,
        )?),
    };
    Ok(match cfg.backend.resolved_cache_dir() {
        Some(dir) => Box::new(CachedBackend::new(base, dir)),
        None => base,
    })
}

fn generate(cfg: &RunConfig, split_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let split = load_split(split_dir)?;
    let backend = make_backend(cfg)?;
    let g = &cfg.generate;
    let seed = cfg.seed();
    let retry = cfg.backend.retry();
    let min_tokens = g.min_tokens;
    let filter = move |t: &str| t.split_whitespace().count() >= min_tokens;
    let options = ExampleGenOptions {
        instruction: match g.mode {
            GenerateMode::Np | GenerateMode::GoldLabel => g.example_instruction.clone(),
            GenerateMode::Fewshot | GenerateMode::Zeroshot => g.fewshot_instruction.clone(),
        },
        params: SamplingParams {
            max_tokens: g.example_max_tokens,
            temperature: g.example_temperature,
            retry,
        },
        attempt_cap_factor: g.attempt_cap_factor,
        concurrency: g.concurrency,
    };
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();

    let label_set = match g.mode {
        GenerateMode::Np => {
            let thesaurus = match &g.thesaurus {
                Some(p) => Thesaurus::load(p)?,
                None => Thesaurus::default(),
            };
            let closed: Vec<String> = split.closed_labels.iter().map(|l| title_case(l)).collect();
            let gold = g.gold_labels.clone().unwrap_or_else(|| split.heldout_labels.clone());
            let params = SamplingParams {
                max_tokens: g.label_max_tokens,
                temperature: g.label_temperature,
                retry,
            };
            let set = generate_label_set(
                &backend,
                &g.label_instruction,
                &closed,
                &gold,
                &thesaurus,
                g.iterations,
                seed,
                params,
            )?;
            Some(set)
        }
        GenerateMode::GoldLabel => Some(NovelLabelSet::from_labels(&split.heldout_labels)),
        GenerateMode::Fewshot | GenerateMode::Zeroshot => None,
    };
    if let Some(set) = &label_set {
        set.write_json(&out.join(LABELS_FILE))?;
        written.push(LABELS_FILE);
        if set.is_empty() {
            bail!("label generation produced no novel labels; see {}", LABELS_FILE);
        }
    }

    let result = match &label_set {
        Some(set) => {
            generate_novel_examples(&backend, &split, set, g.quota, seed, Some(&filter), &options)
        }
        None => generate_fewshot_examples(
            &backend,
            &split,
            g.quota,
            seed,
            g.mode == GenerateMode::Zeroshot,
            Some(&filter),
            &options,
        ),
    };
    let (novelty, failure): (NoveltySet, Option<NoveltyError>) = match result {
        Ok(set) => (set, None),
        Err(NoveltyError::AttemptCap {
            quota,
            accepted,
            attempts,
            partial,
        }) => (
            *partial,
            Some(NoveltyError::AttemptCap {
                quota,
                accepted,
                attempts,
                partial: Box::default(),
            }),
        ),
        Err(e) => return Err(e.into()),
    };
    novelty.write_items(&out.join(NOVELTY_FILE))?;
    novelty.write_rejections(&out.join(REJECTIONS_FILE))?;
    written.extend([NOVELTY_FILE, REJECTIONS_FILE]);

    let mut manifest = Manifest::new("generate", cfg);
    manifest.backend_fingerprints.push(backend.fingerprint());
    manifest.input("split", split_dir)?;
    if let Some(t) = &g.thesaurus {
        manifest.input("thesaurus", t)?;
    }
    manifest.finish(out, &written)?;
    if let Some(e) = failure {
        bail!("{e}; partial results written to {}", out.display());
    }
    println!(
        "generate: {} accepted, {} rejected in {} attempts -> {}",
        novelty.len(),
        novelty.rejected.len(),
        novelty.attempts,
        out.display()
    );
    Ok(())
}

fn novelty_for(cfg: &TrainConfig, path: Option<&Path>) -> Result<Option<NoveltySource>> {
    match (cfg.loss.needs_novelty(), path) {
        (true, None) => bail!("loss {} needs --novelty", cfg.loss),
        (false, Some(_)) => bail!("loss {} does not take --novelty", cfg.loss),
        (true, Some(p)) => Ok(Some(load_novelty(p)?)),
        (false, None) => Ok(None),
    }
}

fn train_cmd(cfg: &RunConfig, split_dir: &Path, novelty_path: Option<&Path>, out: &Path) -> Result<()> {
    cfg.validate()?;
    let split = load_split(split_dir)?;
    let tc = TrainConfig {
        seed: cfg.seed(),
        ..cfg.train.clone()
    };
    let novelty = novelty_for(&tc, novelty_path)?;
    let outcome = train(&split, novelty.as_ref(), &tc, &cfg.features)?;
    std::fs::create_dir_all(out)?;
    outcome.state.save(&out.join(MODEL_FILE))?;
    outcome.write_log(&out.join(TRAIN_LOG))?;
    let mut manifest = Manifest::new("train", cfg);
    manifest.input("split", split_dir)?;
    if let Some(p) = novelty_path {
        manifest.input("novelty", p)?;
    }
    manifest.finish(out, &[MODEL_FILE, TRAIN_LOG])?;
    let last = outcome.log.last();
    println!(
        "train: {} for {} steps, final loss {:.6} -> {}",
        tc.loss,
        tc.steps,
        last.map_or(f64::NAN, |r| r.loss),
        out.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, split_dir: &Path, model: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let split = load_split(split_dir)?;
    let state = ClassifierState::load(model)?;
    let scored = score_test_set(&state, &split)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("code_version".into(), env!("CARGO_PKG_VERSION").into());
    metadata.insert("feature_fingerprint".into(), state.feature_config.fingerprint());
    metadata.insert("model_sha256".into(), run::file_sha256(model)?);
    metadata.insert("split_sha256".into(), run::split_fingerprint(split_dir)?);
    let report = EvalReport::from_scored(&scored, metadata)?;
    report
        .validate()
        .map_err(|m| anyhow::anyhow!("malformed report: {m}"))?;
    std::fs::create_dir_all(out)?;
    report.write_json(&out.join(REPORT_FILE))?;
    write_curve_csv(&report.curve, &out.join(CURVE_FILE))?;
    export_confidence_profile(&scored, &out.join(PROFILE_FILE))?;
    let mut manifest = Manifest::new("eval", cfg);
    manifest.input("split", split_dir)?;
    manifest.input("model", model)?;
    manifest.finish(out, &[REPORT_FILE, CURVE_FILE, PROFILE_FILE])?;
    println!(
        "eval: id_accuracy {:.4}, auac {:.4}, auroc {} -> {}",
        report.id_accuracy,
        report.auac,
        report.auroc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        out.display()
    );
    Ok(())
}

struct SweepInputs {
    split: PathBuf,
    novelty: Option<PathBuf>,
    ood_pool: Option<PathBuf>,
    id_pool: Option<PathBuf>,
}

fn counts(settings: &[f64]) -> Result<Vec<usize>> {
    settings
        .iter()
        .map(|&s| {
            if s >= 0.0 && s.fract() == 0.0 {
                Ok(s as usize)
            } else {
                bail!("setting {s} is not a count")
            }
        })
        .collect()
}

fn sweep(cfg: &RunConfig, kind: SweepKind, inputs: &SweepInputs, out: &Path) -> Result<()> {
    cfg.validate()?;
    let split = load_split(&inputs.split)?;
    let s = &cfg.sweep;
    if s.settings.is_empty() {
        bail!("no sweep settings (--settings or sweep.settings)");
    }
    let novelty = inputs.novelty.as_deref().map(load_novelty).transpose()?;
    let need_novelty = || novelty.as_ref().context("this sweep needs --novelty");
    let table: SweepTable = match kind {
        SweepKind::Noise => {
            let ood = load_pool(inputs.ood_pool.as_deref().context("noise sweeps need --ood-pool")?)?;
            let id = match &inputs.id_pool {
                Some(p) => load_pool(p)?,
                None => split.train.clone(),
            };
            let size = if s.novelty_size == 0 {
                4 * split.train.len()
            } else {
                s.novelty_size
            };
            let plan = NoiseSweep {
                id_fractions: s.settings.clone(),
                losses: s.losses.clone(),
                seeds: cfg.seeds.clone(),
                novelty_size: size,
            };
            run_noise_mixture(&split, MixturePools { ood: &ood, id: &id }, &plan, &cfg.train, &cfg.features)?
        }
        SweepKind::Quota => run_quota_sweep(
            &split,
            need_novelty()?,
            &counts(&s.settings)?,
            &cfg.seeds,
            &cfg.train,
            &cfg.features,
        )?,
        SweepKind::NovelsetSize => run_novelset_size_sweep(
            &split,
            need_novelty()?,
            &counts(&s.settings)?,
            &s.losses,
            &cfg.seeds,
            &cfg.train,
            &cfg.features,
        )?,
        SweepKind::TrainsetSize => {
            if s.losses.iter().any(|l| l.needs_novelty()) {
                need_novelty()?;
            }
            run_trainset_size_sweep(
                &split,
                novelty.as_ref(),
                &counts(&s.settings)?,
                &s.losses,
                &cfg.seeds,
                &cfg.train,
                &cfg.features,
            )?
        }
    };
    std::fs::create_dir_all(out)?;
    let fingerprint = format!("{};{}", &cfg.hash()[..16], cfg.features.fingerprint());
    table.write_csv(&out.join(SWEEP_FILE), &fingerprint)?;
    let mut manifest = Manifest::new(&format!("sweep {kind}"), cfg);
    manifest.input("split", &inputs.split)?;
    for (name, p) in [
        ("novelty", &inputs.novelty),
        ("ood_pool", &inputs.ood_pool),
        ("id_pool", &inputs.id_pool),
    ] {
        if let Some(p) = p {
            manifest.input(name, p)?;
        }
    }
    manifest.finish(out, &[SWEEP_FILE])?;
    println!("sweep {kind}:");
    print_means(&table);
    Ok(())
}

fn print_means(table: &SweepTable) {
    println!(
        "  {:<16} {:>12} {:>8} {:>8} {:>8}",
        "loss",
        table.kind.setting_name(),
        "auac",
        "auroc",
        "id_acc"
    );
    for r in table.means() {
        println!(
            "  {:<16} {:>12} {:>8.4} {:>8} {:>8.4}",
            r.loss.to_string(),
            r.setting,
            r.auac,
            r.auroc.map_or("n/a".into(), |a| format!("{a:.4}")),
            r.id_accuracy
        );
    }
}

fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for dir in runs {
        let path = if dir.is_dir() { dir.join(REPORT_FILE) } else { dir.clone() };
        if path.exists() {
            let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            r.validate()
                .map_err(|m| anyhow::anyhow!("{}: {m}", path.display()))?;
            rows.push((dir.display().to_string(), r));
        } else if dir.join(SWEEP_FILE).exists() {
            println!("{}:", dir.display());
            print!("{}", std::fs::read_to_string(dir.join(SWEEP_FILE))?);
        } else {
            bail!("{} has neither {REPORT_FILE} nor {SWEEP_FILE}", dir.display());
        }
    }
    if !rows.is_empty() {
        println!(
            "{:<40} {:>6} {:>6} {:>8} {:>8} {:>8}",
            "run", "n_id", "n_ood", "id_acc", "auac", "auroc"
        );
        for (name, r) in &rows {
            println!(
                "{:<40} {:>6} {:>6} {:>8.4} {:>8.4} {:>8}",
                name,
                r.n_id,
                r.n_ood,
                r.id_accuracy,
                r.auac,
                r.auroc.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
    }
    if let Some(out) = out {
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["run", "n_id", "n_ood", "id_accuracy", "auac", "auroc"])?;
        for (name, r) in &rows {
            w.write_record([
                name.clone(),
                r.n_id.to_string(),
                r.n_ood.to_string(),
                conal::eval::format_sig9(r.id_accuracy),
                conal::eval::format_sig9(r.auac),
                r.auroc.map(conal::eval::format_sig9).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}
