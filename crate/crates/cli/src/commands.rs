use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use progtrig::checkpoint::ModelCheckpoint;
use progtrig::decision::{decide, decisions_csv, hours_per_fa, Outcome, Thresholds};
use progtrig::experiment::{evaluate, write_evaluation};
use progtrig::scorer::{score_manifest, stub_first_pass, ScoreRequest, ScoreTable, Scorer};
use progtrig::synthgen::{generate_corpus, CorpusManifest, GenConfig};
use progtrig::trainer::{init_checkpoint, train_from, TrainingData};
use progtrig::util::fmt_sig9;
use progtrig::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Common, EvalArgs, GenArgs, ScoreArgs, StreamArgs, TrainArgs};

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out = Some(out.clone());
    }
    cfg.derive_seeds();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))? + "\n";
    write_text(path, &body)
}

/// Record this command's outputs in `<out>/artifacts.json`, keyed by
/// command, with paths relative to `out`.
fn record_artifacts(out: &Path, command: &str, files: &[PathBuf]) -> Result<()> {
    let path = out.join("artifacts.json");
    let mut all: BTreeMap<String, Vec<String>> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?,
        Err(_) => BTreeMap::new(),
    };
    let mut rel: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/"))
        .collect();
    rel.sort();
    all.insert(command.to_string(), rel);
    write_json(&path, &all)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out()?.to_path_buf();
    fs::create_dir_all(&out).map_err(io(&out))?;
    Ok(out)
}

fn save_config(cfg: &RunConfig, out: &Path, command: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = out.join(format!("run_config.{command}.json"));
    write_text(&path, &cfg.to_json())?;
    files.push(path);
    Ok(())
}

/// Alphabet and vocabulary settings the corpus was generated with, when
/// the corpus records them.
fn corpus_gen_config(corpus: &Path) -> Result<Option<GenConfig>> {
    let dir = if corpus.is_dir() {
        corpus.to_path_buf()
    } else {
        corpus.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let path = dir.join("gen_config.json");
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        }),
        Err(_) => Ok(None),
    }
}

pub fn gen_data(a: GenArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(n) = a.n_positive {
        cfg.gen.n_positive = n;
    }
    if let Some(n) = a.n_negative {
        cfg.gen.n_negative = n;
    }
    if let Some(h) = a.timeline_hours {
        cfg.gen.negative_timeline_hours = h;
    }
    cfg.gen.validate()?;
    let out = out_dir(&cfg)?;
    let manifest = generate_corpus(&cfg.gen, &out)?;
    let mut files: Vec<PathBuf> = vec![out.join(progtrig::synthgen::MANIFEST_FILE), out.join("gen_config.json")];
    files.extend(manifest.entries.iter().map(|e| out.join(&e.path)));
    files.extend(manifest.timeline.iter().map(|c| out.join(&c.path)));
    save_config(&cfg, &out, "gen-data", &mut files)?;
    record_artifacts(&out, "gen-data", &files)?;
    println!(
        "wrote {} utterances and {:.3} h of timeline to {}",
        manifest.entries.len(),
        manifest.negative_timeline_hours(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    train_utterances: usize,
    holdout_utterances: usize,
    phonetic_skipped: usize,
    holdout_accuracy: Option<f64>,
    final_phonetic_loss: Option<f64>,
    final_disc_loss: Option<f64>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(c) = a.corpus {
        cfg.paths.corpus = Some(c);
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.clip_norm {
        cfg.train.clip_norm = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.max_steps {
        cfg.train.max_steps = v;
    }
    if let Some(v) = a.lambda {
        cfg.train.lambda_disc = v;
    }
    if let Some(v) = a.accuracy_floor {
        cfg.train.accuracy_floor = Some(v);
    }
    let corpus = cfg.corpus()?.to_path_buf();
    if let Some(g) = corpus_gen_config(&corpus)? {
        cfg.gen.alphabet = g.alphabet;
    }
    cfg.sync_model_shape();
    cfg.validate()?;
    let out = out_dir(&cfg)?;
    let manifest = CorpusManifest::load(&corpus)?;

    let resume = a.resume.as_deref().map(ModelCheckpoint::load).transpose()?;
    if let Some(r) = &resume {
        if r.optimizer.is_none() && r.step > 0 {
            return Err(Error::Checkpoint("resume checkpoint has no optimizer state".into()));
        }
    }
    let data = TrainingData::load(
        &manifest,
        &cfg.frontend,
        &cfg.gen.alphabet,
        &cfg.train,
        resume.as_ref().map(|r| &r.normalizer),
    )?;
    let start = match resume {
        Some(r) => r,
        None => init_checkpoint(cfg.model.clone(), cfg.frontend.clone(), &data, &cfg.train)?,
    };
    let result = train_from(start, &data, &cfg.train)?;

    let mut files = Vec::new();
    let ckpt_path = out.join("model.ckpt");
    result.checkpoint.save(&ckpt_path)?;
    files.push(ckpt_path);
    let log_path = out.join("train_log.csv");
    result.log.write_csv(&log_path)?;
    files.push(log_path);
    let last = result.log.rows.last();
    let summary = TrainSummary {
        steps: result.checkpoint.step,
        train_utterances: data.len(),
        holdout_utterances: data.holdout_len(),
        phonetic_skipped: data.phonetic_skipped,
        holdout_accuracy: result.holdout_accuracy,
        final_phonetic_loss: last.map(|r| r.phonetic_loss),
        final_disc_loss: last.map(|r| r.disc_loss),
    };
    let summary_path = out.join("train_summary.json");
    write_json(&summary_path, &summary)?;
    files.push(summary_path);
    save_config(&cfg, &out, "train", &mut files)?;
    record_artifacts(&out, "train", &files)?;
    println!(
        "trained to step {}; holdout accuracy {}",
        result.checkpoint.step,
        result.holdout_accuracy.map(fmt_sig9).unwrap_or_else(|| "n/a".into())
    );
    result.check_floor(cfg.train.accuracy_floor)
}

pub fn score(a: ScoreArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(c) = a.corpus {
        cfg.paths.corpus = Some(c);
    }
    if let Some(c) = a.checkpoint {
        cfg.paths.checkpoint = Some(c);
    }
    if let Some(c) = a.contexts {
        cfg.eval.contexts = c;
    }
    if let Some(c) = a.early_context {
        cfg.eval.early_context = c;
    }
    if let Some(c) = a.late_context {
        cfg.eval.late_context = c;
    }
    if let Some(g) = a.aggregation {
        cfg.aggregation = g.into();
    }
    cfg.eval.validate()?;
    let manifest = CorpusManifest::load(cfg.corpus()?)?;
    let ckpt = ModelCheckpoint::load(cfg.checkpoint()?)?;
    let out = out_dir(&cfg)?;
    let scorer = Scorer::new(ckpt, cfg.aggregation)?;
    let table = score_manifest(
        &scorer,
        &manifest,
        a.split.into(),
        a.ids.as_deref(),
        !a.no_timeline,
        &cfg.eval.all_contexts(),
        &cfg.stub,
    )?;
    let mut files = Vec::new();
    let scores_path = out.join("scores.csv");
    write_text(&scores_path, &table.scores_csv())?;
    files.push(scores_path);
    let pairs_path = out.join("pairs.csv");
    write_text(&pairs_path, &table.pairs_csv(cfg.eval.early_context, cfg.eval.late_context)?)?;
    files.push(pairs_path);
    save_config(&cfg, &out, "score", &mut files)?;
    record_artifacts(&out, "score", &files)?;
    println!(
        "scored {} candidates at {} contexts",
        table.rows.len(),
        table.contexts.len()
    );
    Ok(())
}

pub fn calibrate_evaluate(a: EvalArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(c) = a.corpus {
        cfg.paths.corpus = Some(c);
    }
    if let Some(v) = a.early_frr {
        cfg.eval.early_frr = v;
    }
    if let Some(v) = a.late_frr {
        cfg.eval.late_frr = v;
    }
    if let Some(v) = a.late_target {
        cfg.eval.late_target = v.into();
    }
    if let Some(v) = a.fa_budget {
        cfg.eval.fa_budget = v;
    }
    if let Some(c) = a.early_context {
        cfg.eval.early_context = c;
    }
    if let Some(c) = a.late_context {
        cfg.eval.late_context = c;
    }
    cfg.eval.validate()?;
    let out = out_dir(&cfg)?;
    let scores_path = a.scores.unwrap_or_else(|| out.join("scores.csv"));
    let text = fs::read_to_string(&scores_path).map_err(io(&scores_path))?;
    let table = ScoreTable::parse_scores_csv(&text, &scores_path)?;
    let manifest = CorpusManifest::load(cfg.corpus()?)?;
    let eval = evaluate(&table, manifest.negative_timeline_hours(), &cfg.eval)?;
    let (mut files, warnings) = write_evaluation(&eval, &out)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    save_config(&cfg, &out, "calibrate-evaluate", &mut files)?;
    record_artifacts(&out, "calibrate-evaluate", &files)?;
    let show = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_else(|| "n/a".into());
    for c in &eval.contexts {
        println!("context {} s: FRR at {} FAs = {}", fmt_sig9(c.context), eval.fa_budget, show(c.frr_at_fa_budget));
    }
    println!(
        "thresholds: early {} late {}; FRR {} with {} FAs ({} h/FA); defer {}; mean latency {} s",
        fmt_sig9(eval.thresholds.early_accept),
        fmt_sig9(eval.thresholds.late_accept),
        fmt_sig9(eval.policy.frr),
        eval.policy.fa_count,
        fmt_sig9(eval.policy.hours_per_fa),
        fmt_sig9(eval.policy.defer_fraction),
        show(eval.policy.mean_latency_s)
    );
    Ok(())
}

#[derive(Serialize)]
struct StreamReport {
    timeline_hours: f64,
    candidates: usize,
    fa_count: usize,
    #[serde(serialize_with = "progtrig::decision::serialize_hours")]
    hours_per_fa: f64,
    n_accept_early: usize,
    n_accept_late: usize,
    late_evaluations: usize,
    thresholds: Thresholds,
}

pub fn simulate_stream(a: StreamArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(c) = a.corpus {
        cfg.paths.corpus = Some(c);
    }
    if let Some(c) = a.checkpoint {
        cfg.paths.checkpoint = Some(c);
    }
    let mut th = match &a.thresholds {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io(path))?;
            serde_json::from_str::<Thresholds>(&text).map_err(|e| Error::Format {
                path: path.clone(),
                message: e.to_string(),
            })?
        }
        None => Thresholds {
            early_accept: 0.5,
            late_accept: 0.5,
            early_context: cfg.eval.early_context,
            late_context: cfg.eval.late_context,
        },
    };
    if let Some(v) = a.early_threshold {
        th.early_accept = v;
    }
    if let Some(v) = a.late_threshold {
        th.late_accept = v;
    }
    let manifest = CorpusManifest::load(cfg.corpus()?)?;
    if manifest.timeline.is_empty() {
        return Err(Error::EmptyDataset("corpus has no negative timeline".into()));
    }
    let scorer = Scorer::new(ModelCheckpoint::load(cfg.checkpoint()?)?, cfg.aggregation)?;
    let out = out_dir(&cfg)?;
    let mut decisions = Vec::new();
    for chunk in &manifest.timeline {
        let audio = progtrig::audio::read_wav(&manifest.resolve(&chunk.path))?;
        let cands = stub_first_pass(&audio, &chunk.id, &cfg.stub);
        let chunk_decisions = cands
            .par_iter()
            .map(|c| {
                let request = |post_context| ScoreRequest {
                    candidate: c.clone(),
                    post_context,
                };
                let early = scorer.score_segment(&audio, &request(th.early_context))?;
                decide(&c.key(), early, || scorer.score_segment(&audio, &request(th.late_context)), &th)
            })
            .collect::<Result<Vec<_>>>()?;
        decisions.extend(chunk_decisions);
    }
    let hours = manifest.negative_timeline_hours();
    let count = |o: Outcome| decisions.iter().filter(|d| d.outcome == o).count();
    let fa = decisions.iter().filter(|d| d.outcome.accepted()).count();
    let report = StreamReport {
        timeline_hours: hours,
        candidates: decisions.len(),
        fa_count: fa,
        hours_per_fa: hours_per_fa(hours, fa),
        n_accept_early: count(Outcome::AcceptEarly),
        n_accept_late: count(Outcome::AcceptLate),
        late_evaluations: decisions.iter().filter(|d| d.late.is_some()).count(),
        thresholds: th,
    };
    let mut files = Vec::new();
    let report_path = out.join("stream_report.json");
    write_json(&report_path, &report)?;
    files.push(report_path);
    let dec_path = out.join("stream_decisions.csv");
    write_text(&dec_path, &decisions_csv(&decisions))?;
    files.push(dec_path);
    save_config(&cfg, &out, "simulate-stream", &mut files)?;
    record_artifacts(&out, "simulate-stream", &files)?;
    println!(
        "{} candidates over {:.3} h: {} FAs ({} h/FA)",
        report.candidates,
        hours,
        fa,
        fmt_sig9(report.hours_per_fa)
    );
    Ok(())
}
