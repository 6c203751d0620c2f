//! Experiment orchestration: data preparation, the two training phases,
//! run directories and the reports built from them.
//!
//! A run directory holds everything needed to inspect or re-create a run:
//!
//! | file               | contents                                            |
//! |--------------------|-----------------------------------------------------|
//! | `manifest.txt`     | version, command, seeds, file names, full config    |
//! | `events.tsv`       | interaction stream used                             |
//! | `catalog.tsv`      | item content features used                          |
//! | `codebook.txt`     | RQ-KMeans centroids                                 |
//! | `warmup_sids.tsv`  | collision-free warm-up SID per item                 |
//! | `train_log.csv`    | per-step losses, filter pass rate, index churn      |
//! | `validation.csv`   | warm-up validation losses seen by the scheduler     |
//! | `metrics.csv`      | ranking and codebook metrics per evaluation point   |
//! | `baseline.csv`     | popularity baseline                                 |
//! | `index.tsv`        | final beam index                                    |
//! | `checkpoint.txt`   | final parameters, optimiser moments, trainer state  |

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use coevo_core::coevolution::{Phase, Sample, StepMetrics, Trainer};
use coevo_core::datagen::{generate_stream, generate_world, leave_one_out_split, Event};
use coevo_core::eval::{codebook_density, codebook_entropy, most_popular, ndcg_at_k, recall_at_k, CodebookUsage, RankingResult};
use coevo_core::index::BeamIndex;
use coevo_core::rqkmeans::{self, Codebook};
use coevo_core::{rng, CodebookSpec};
use rand::Rng;

use crate::config::{fmt_f64, RunConfig};
use crate::error::{read_file, write_file, HarnessError, Result};
use crate::formats;

/// Version string recorded in manifests.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Seed streams split off the root seed.
const STREAM_CODEBOOK: u64 = 31;
const STREAM_BATCHES: u64 = 41;

pub const MANIFEST: &str = "manifest.txt";
pub const EVENTS: &str = "events.tsv";
pub const CATALOG: &str = "catalog.tsv";
pub const CODEBOOK: &str = "codebook.txt";
pub const WARMUP_SIDS: &str = "warmup_sids.tsv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VALIDATION: &str = "validation.csv";
pub const METRICS: &str = "metrics.csv";
pub const BASELINE: &str = "baseline.csv";
pub const INDEX: &str = "index.tsv";
pub const CHECKPOINT: &str = "checkpoint.txt";

/// Cut-offs reported for Recall and NDCG.
pub const CUTOFFS: [usize; 2] = [5, 10];

// ---------------------------------------------------------------- data

/// Events plus item content features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub events: Vec<Event>,
    pub content: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn behaviors(&self) -> usize {
        self.events.first().map_or(0, |e| e.labels.len())
    }

    /// Item ids must index the catalog.
    pub fn validate(&self) -> Result<()> {
        if self.content.is_empty() {
            return Err(HarnessError::Data("catalog is empty".into()));
        }
        if self.events.is_empty() {
            return Err(HarnessError::Data("event stream is empty".into()));
        }
        if let Some(e) = self.events.iter().find(|e| e.item as usize >= self.content.len()) {
            return Err(HarnessError::Data(format!(
                "event of user {} at {} names item {}, catalog has {} items",
                e.user,
                e.timestamp,
                e.item,
                self.content.len()
            )));
        }
        Ok(())
    }
}

/// Generates the synthetic world and stream for `cfg`.
pub fn synthesise(cfg: &RunConfig) -> Result<Dataset> {
    let world = generate_world(&cfg.world, cfg.seed).map_err(|e| HarnessError::Config(format!("world: {e}")))?;
    let events = generate_stream(&world, cfg.data.n_events).map_err(|e| HarnessError::Config(format!("stream: {e}")))?;
    Ok(Dataset { events, content: world.content })
}

/// Loads the configured files, or synthesises when none are configured.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = if cfg.data.events.is_empty() {
        synthesise(cfg)?
    } else {
        Dataset {
            events: formats::load_events(Path::new(&cfg.data.events))?,
            content: formats::load_catalog(Path::new(&cfg.data.catalog))?,
        }
    };
    data.validate()?;
    Ok(data)
}

/// A ranking case: user, history (oldest first), held-out item.
pub type Case = (u32, Vec<u32>, u32);

/// Training samples, scheduler validation samples and test cases under
/// the leave-one-out protocol.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub samples: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub cases: Vec<Case>,
    /// Global top-10 most frequent training items.
    pub popular: Vec<u32>,
}

pub fn prepare(events: &[Event], history_len: usize, validation_users: usize) -> Result<Prepared> {
    let split = leave_one_out_split(events).map_err(|e| HarnessError::Data(e.to_string()))?;
    let mut samples = Vec::new();
    let mut validation = Vec::new();
    let mut cases = Vec::new();
    for s in &split {
        for (i, e) in s.train.iter().enumerate() {
            let history: Vec<u32> = s.train[i.saturating_sub(history_len)..i].iter().map(|e| e.item).collect();
            samples.push(Sample { user: s.user, history, target: e.item, labels: e.labels.clone() });
        }
        if let Some(v) = &s.valid {
            if validation_users == 0 || validation.len() < validation_users {
                validation.push(Sample { user: s.user, history: s.train_history(history_len), target: v.item, labels: v.labels.clone() });
            }
        }
        if let Some(t) = &s.test {
            cases.push((s.user, s.test_history(history_len), t.item));
        }
    }
    if samples.is_empty() || validation.is_empty() || cases.is_empty() {
        return Err(HarnessError::Data("too few events for a leave-one-out split (users need >= 3 events)".into()));
    }
    let popular = most_popular(split.iter().flat_map(|s| s.train.iter().map(|e| e.item)), 10);
    Ok(Prepared { samples, validation, cases, popular })
}

// ---------------------------------------------------------------- metrics

/// One evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub phase: String,
    /// Recall at each of [`CUTOFFS`].
    pub recall: Vec<f64>,
    /// NDCG at each of [`CUTOFFS`].
    pub ndcg: Vec<f64>,
    /// Per-level entropy (bits) of top-weight SID usage.
    pub entropy: Vec<f64>,
    /// Per-level fraction of active codes.
    pub density: Vec<f64>,
}

impl EvalRow {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall[CUTOFFS.iter().position(|&c| c == k).expect("reported cut-off")]
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg[CUTOFFS.iter().position(|&c| c == k).expect("reported cut-off")]
    }

    pub fn csv_header(levels: usize) -> String {
        let mut cols: Vec<String> = vec!["step".into(), "phase".into()];
        cols.extend(CUTOFFS.iter().map(|k| format!("recall@{k}")));
        cols.extend(CUTOFFS.iter().map(|k| format!("ndcg@{k}")));
        cols.extend((1..=levels).map(|l| format!("H_level_{l}")));
        cols.extend((1..=levels).map(|l| format!("density_level_{l}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.phase.clone()];
        for v in self.recall.iter().chain(&self.ndcg).chain(&self.entropy).chain(&self.density) {
            cols.push(fmt_f64(*v));
        }
        cols.join(",")
    }

    pub fn parse_csv(line: &str, levels: usize) -> Option<Self> {
        let cols: Vec<&str> = line.split(',').collect();
        let n = CUTOFFS.len();
        if cols.len() != 2 + 2 * n + 2 * levels {
            return None;
        }
        let nums: Vec<f64> = cols[2..].iter().map(|c| c.parse().ok()).collect::<Option<_>>()?;
        Some(Self {
            step: cols[0].parse().ok()?,
            phase: cols[1].to_string(),
            recall: nums[..n].to_vec(),
            ndcg: nums[n..2 * n].to_vec(),
            entropy: nums[2 * n..2 * n + levels].to_vec(),
            density: nums[2 * n + levels..].to_vec(),
        })
    }
}

/// Entropy and density of an index's SID usage.
pub fn codebook_metrics(index: &BeamIndex, spec: &CodebookSpec, all_aliases: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let usage = CodebookUsage::from_index(index, spec, all_aliases);
    let (entropy, _) = codebook_entropy(&usage).map_err(|e| HarnessError::Data(format!("codebook usage: {e}")))?;
    let density = codebook_density(&usage).map_err(|e| HarnessError::Data(format!("codebook usage: {e}")))?;
    Ok((entropy, density))
}

fn ranking_metrics(results: &[RankingResult]) -> Result<(Vec<f64>, Vec<f64>)> {
    let recall = CUTOFFS.iter().map(|&k| recall_at_k(results, k)).collect::<coevo_core::Result<Vec<_>>>();
    let ndcg = CUTOFFS.iter().map(|&k| ndcg_at_k(results, k)).collect::<coevo_core::Result<Vec<_>>>();
    match (recall, ndcg) {
        (Ok(r), Ok(n)) => Ok((r, n)),
        (Err(e), _) | (_, Err(e)) => Err(HarnessError::Data(e.to_string())),
    }
}

/// Decodes the top items for every case and scores them.
pub fn evaluate(trainer: &Trainer, cases: &[Case], beam: usize) -> Result<EvalRow> {
    let k = *CUTOFFS.iter().max().unwrap_or(&10);
    let results = trainer.evaluate(cases, beam, k).map_err(HarnessError::from_core)?;
    let (recall, ndcg) = ranking_metrics(&results)?;
    let (entropy, density) = codebook_metrics(&trainer.index, &trainer.spec, false)?;
    Ok(EvalRow { step: trainer.step, phase: trainer.phase.phase.name().into(), recall, ndcg, entropy, density })
}

/// Recall/NDCG of recommending the same popular list to everyone.
pub fn popularity_baseline(prepared: &Prepared) -> Result<(Vec<f64>, Vec<f64>)> {
    let results: Vec<RankingResult> = prepared
        .cases
        .iter()
        .map(|(u, _, t)| RankingResult { user: *u, ranked: prepared.popular.clone(), target: *t })
        .collect();
    ranking_metrics(&results)
}

// ---------------------------------------------------------------- runs

/// What a subcommand asks the pipeline to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    /// Phase 1 until the scheduler switches.
    Warmup,
    /// Phase 1 followed by `run.dynamic_steps` dynamic steps.
    Coevolve,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Warmup => "warmup",
            RunKind::Coevolve => "coevolve",
        }
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    /// Metrics at the end of the warm-up.
    pub warmup: EvalRow,
    /// Metrics at the end of the dynamic phase, if it ran.
    pub final_row: Option<EvalRow>,
    /// Popularity baseline (recall, ndcg) at [`CUTOFFS`].
    pub baseline: (Vec<f64>, Vec<f64>),
    pub warmup_steps: u64,
    /// Wall time from start through the warm-up evaluation.
    pub warmup_time: Duration,
    /// Index invariant checks performed (one per dynamic step).
    pub invariant_checks: usize,
    pub trainer: Trainer,
}

struct CsvLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut log = Self { out: BufWriter::new(file), path };
        log.line(header)?;
        Ok(log)
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

pub const TRAIN_LOG_HEADER: &str = "step,phase,user,item,xtr,reference,kl,total,filter_pass_rate,links_added,links_removed";

fn train_log_row(m: &StepMetrics) -> String {
    let l = &m.losses;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        m.step,
        m.phase.name(),
        fmt_f64(l.user),
        fmt_f64(l.item),
        fmt_f64(l.xtr),
        fmt_f64(l.reference),
        fmt_f64(l.kl),
        fmt_f64(l.total),
        fmt_f64(m.filter_pass_rate),
        m.links_added,
        m.links_removed
    )
}

/// Manifest text: `manifest.*` records followed by the canonical config,
/// so the manifest itself is a valid config file.
pub fn manifest_text(cfg: &RunConfig, command: &str, status: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "manifest.version = {VERSION}");
    let _ = writeln!(out, "manifest.command = {command}");
    let _ = writeln!(out, "manifest.status = {status}");
    let _ = writeln!(out, "manifest.config_hash = {}", cfg.hash());
    let _ = writeln!(out, "manifest.seed.root = {}", cfg.seed);
    let _ = writeln!(out, "manifest.seed.world = {}", cfg.seed);
    let _ = writeln!(out, "manifest.seed.models = {}", cfg.seed);
    let _ = writeln!(out, "manifest.seed.codebook = {}", rng::split(cfg.seed, STREAM_CODEBOOK));
    let _ = writeln!(out, "manifest.seed.batches = {}", rng::split(cfg.seed, STREAM_BATCHES));
    for (key, file) in [
        ("events", EVENTS),
        ("catalog", CATALOG),
        ("codebook", CODEBOOK),
        ("warmup_sids", WARMUP_SIDS),
        ("train_log", TRAIN_LOG),
        ("validation", VALIDATION),
        ("metrics", METRICS),
        ("baseline", BASELINE),
        ("index", INDEX),
        ("checkpoint", CHECKPOINT),
    ] {
        let _ = writeln!(out, "manifest.file.{key} = {file}");
    }
    out.push_str(&cfg.canonical());
    out
}

fn manifest_value(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Writes a synthetic dataset and its manifest into `dir`.
pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let data = synthesise(cfg)?;
    create_dir(dir)?;
    write_file(&dir.join(EVENTS), &formats::write_events(&data.events))?;
    write_file(&dir.join(CATALOG), &formats::write_catalog(&data.content))?;
    write_file(&dir.join(MANIFEST), &manifest_text(cfg, "synth", "complete"))?;
    Ok(data)
}

/// Builds the trainer (codebook fit, warm-up SID assignment) for a dataset.
pub fn build_trainer(cfg: &RunConfig, data: &Dataset) -> Result<(Trainer, Codebook)> {
    let dim = data.content[0].len();
    let tc = cfg.training_config(dim, data.behaviors())?;
    let spec = CodebookSpec::new(cfg.codebook.levels, cfg.codebook.codes, dim)
        .map_err(|e| HarnessError::Config(format!("codebook: {e}")))?;
    let codebook = rqkmeans::fit(&data.content, spec, cfg.codebook.kmeans_iters, rng::split(cfg.seed, STREAM_CODEBOOK))
        .map_err(HarnessError::from_core)?;
    let (trainer, _) = Trainer::new(tc, &codebook, &data.content).map_err(HarnessError::from_core)?;
    Ok((trainer, codebook))
}

fn check_step(m: &StepMetrics, trainer: &Trainer) -> Result<()> {
    let l = &m.losses;
    if [l.user, l.item, l.xtr, l.reference, l.kl, l.total].iter().any(|v| !v.is_finite()) {
        return Err(HarnessError::Invariant(format!("non-finite loss at step {}", m.step)));
    }
    trainer
        .index
        .check_invariants()
        .map_err(|e| HarnessError::Invariant(format!("index after step {}: {e}", m.step)))
}

/// Runs the pipeline and writes a complete run directory.
pub fn run(cfg: &RunConfig, kind: RunKind, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    run_with_data(cfg, kind, dir, data)
}

pub fn run_with_data(cfg: &RunConfig, kind: RunKind, dir: &Path, data: Dataset) -> Result<RunOutcome> {
    let started = Instant::now();
    data.validate()?;
    create_dir(dir)?;
    let command = kind.name();
    write_file(&dir.join(MANIFEST), &manifest_text(cfg, command, "running"))?;
    write_file(&dir.join(EVENTS), &formats::write_events(&data.events))?;
    write_file(&dir.join(CATALOG), &formats::write_catalog(&data.content))?;

    let prepared = prepare(&data.events, cfg.train.recommender.n_max, cfg.run.validation_users)?;
    let (mut trainer, codebook) = build_trainer(cfg, &data)?;
    let levels = trainer.spec.levels;
    write_file(&dir.join(CODEBOOK), &formats::write_codebook(&codebook))?;
    write_file(&dir.join(WARMUP_SIDS), &formats::write_sids(&trainer.warmup_sids))?;

    let baseline = popularity_baseline(&prepared)?;
    let mut base_text = String::from("metric,value\n");
    for (i, k) in CUTOFFS.iter().enumerate() {
        let _ = writeln!(base_text, "recall@{k},{}", fmt_f64(baseline.0[i]));
        let _ = writeln!(base_text, "ndcg@{k},{}", fmt_f64(baseline.1[i]));
    }
    write_file(&dir.join(BASELINE), &base_text)?;

    let mut train_log = CsvLog::create(dir.join(TRAIN_LOG), TRAIN_LOG_HEADER)?;
    let mut val_log = CsvLog::create(dir.join(VALIDATION), "step,validation_loss")?;
    let mut metrics = CsvLog::create(dir.join(METRICS), &EvalRow::csv_header(levels))?;
    let mut batch_rng = rng::seeded(rng::split(cfg.seed, STREAM_BATCHES));
    let mut draw = |n: usize| -> Vec<Sample> {
        (0..n).map(|_| prepared.samples[batch_rng.gen_range(0..prepared.samples.len())].clone()).collect()
    };
    let log_every = cfg.run.log_every as u64;

    while trainer.phase.phase == Phase::Warmup {
        let m = trainer.warmup_step(&draw(cfg.run.warmup_batch)).map_err(HarnessError::from_core)?;
        check_step(&m, &trainer)?;
        train_log.line(&train_log_row(&m))?;
        if log_every > 0 && m.step % log_every == 0 {
            eprintln!("[{:>7.1?}] warmup step {} loss {:.4}", started.elapsed(), m.step, m.losses.total);
        }
        if trainer.phase.steps_in_phase % cfg.run.eval_every as u64 == 0 {
            let loss = trainer.validation_loss(&prepared.validation).map_err(HarnessError::from_core)?;
            val_log.line(&format!("{},{}", trainer.step, fmt_f64(loss)))?;
            trainer.observe_validation(loss);
        }
    }
    val_log.flush()?;
    let warmup_steps = trainer.step;
    let mut warmup_row = evaluate(&trainer, &prepared.cases, cfg.run.eval_beam)?;
    warmup_row.phase = Phase::Warmup.name().into();
    metrics.line(&warmup_row.csv_row())?;
    metrics.flush()?;
    let warmup_time = started.elapsed();
    if log_every > 0 {
        eprintln!("[{:>7.1?}] warm-up done after {warmup_steps} steps, recall@10 {:.4}", started.elapsed(), warmup_row.recall_at(10));
    }

    let mut final_row = None;
    let mut invariant_checks = 0;
    if kind == RunKind::Coevolve {
        let total = cfg.run.dynamic_steps;
        for i in 1..=total {
            let m = trainer.dynamic_step(&draw(cfg.run.dynamic_batch)).map_err(HarnessError::from_core)?;
            check_step(&m, &trainer)?;
            invariant_checks += 1;
            train_log.line(&train_log_row(&m))?;
            if log_every > 0 && i as u64 % log_every == 0 {
                eprintln!(
                    "[{:>7.1?}] dynamic step {i}/{total} loss {:.4} pass {:.2} churn +{} -{}",
                    started.elapsed(),
                    m.losses.total,
                    m.filter_pass_rate,
                    m.links_added,
                    m.links_removed
                );
            }
            let every = cfg.run.dynamic_eval_every;
            if i == total || (every > 0 && i % every == 0) {
                let row = evaluate(&trainer, &prepared.cases, cfg.run.eval_beam)?;
                metrics.line(&row.csv_row())?;
                metrics.flush()?;
                if i == total {
                    final_row = Some(row);
                }
            }
        }
    }
    train_log.flush()?;

    write_file(&dir.join(INDEX), &formats::write_index(&trainer.index, &trainer.spec))?;
    write_file(&dir.join(CHECKPOINT), &formats::write_checkpoint(&trainer, &cfg.hash()))?;
    write_file(&dir.join(MANIFEST), &manifest_text(cfg, command, "complete"))?;
    Ok(RunOutcome {
        run_dir: dir.to_path_buf(),
        warmup: warmup_row,
        final_row,
        baseline,
        warmup_steps,
        warmup_time,
        invariant_checks,
        trainer,
    })
}

/// A run directory loaded back into memory.
pub struct LoadedRun {
    pub config: RunConfig,
    pub data: Dataset,
    pub trainer: Trainer,
    pub codebook: Codebook,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(HarnessError::Data(format!("missing file {}", path.display())))
    }
}

/// Rebuilds the trainer of a run from its manifest, data, codebook,
/// checkpoint and index snapshot.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = RunConfig::from_file(&require(dir, MANIFEST)?)?;
    let data = Dataset {
        events: formats::load_events(&require(dir, EVENTS)?)?,
        content: formats::load_catalog(&require(dir, CATALOG)?)?,
    };
    data.validate()?;
    let cb_path = require(dir, CODEBOOK)?;
    let codebook = formats::parse_codebook(&read_file(&cb_path)?, &cb_path.display().to_string())?;
    let tc = config.training_config(data.content[0].len(), data.behaviors())?;
    let (mut trainer, _) = Trainer::new(tc, &codebook, &data.content).map_err(HarnessError::from_core)?;
    let ck_path = require(dir, CHECKPOINT)?;
    formats::read_checkpoint(&read_file(&ck_path)?, &ck_path.display().to_string(), &mut trainer, &config.hash())?;
    let idx_path = require(dir, INDEX)?;
    let (index, spec) = formats::parse_index(&read_file(&idx_path)?, &idx_path.display().to_string())?;
    if (spec.levels, spec.codes_per_level) != (trainer.spec.levels, trainer.spec.codes_per_level) {
        return Err(HarnessError::Data(format!("{}: index shape does not match the codebook", idx_path.display())));
    }
    if index.capacity() != trainer.config.index.capacity {
        return Err(HarnessError::Data(format!("{}: index capacity does not match the config", idx_path.display())));
    }
    index.check_invariants().map_err(|e| HarnessError::Invariant(format!("{}: {e}", idx_path.display())))?;
    trainer.index = index;
    Ok(LoadedRun { config, data, trainer, codebook })
}

/// Re-evaluates a run from its artifacts; writes `eval.csv` into the run.
pub fn eval(dir: &Path) -> Result<EvalRow> {
    let run = load_run(dir)?;
    let prepared = prepare(&run.data.events, run.config.train.recommender.n_max, run.config.run.validation_users)?;
    let row = evaluate(&run.trainer, &prepared.cases, run.config.run.eval_beam)?;
    let text = format!("{}\n{}\n", EvalRow::csv_header(run.trainer.spec.levels), row.csv_row());
    write_file(&dir.join("eval.csv"), &text)?;
    Ok(row)
}

// ---------------------------------------------------------------- reports

/// Aggregates of one phase of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub phase: String,
    pub steps: usize,
    /// Mean of each loss column (user, item, xtr, reference, kl, total).
    pub mean_losses: [f64; 6],
    pub mean_filter_pass_rate: f64,
    pub links_added: u64,
    pub links_removed: u64,
    /// Last evaluation row recorded for the phase.
    pub last_eval: Option<EvalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub phases: Vec<PhaseSummary>,
    pub warnings: Vec<String>,
}

fn read_optional(path: &Path, warnings: &mut Vec<String>) -> Option<String> {
    match std::fs::read_to_string(path) {
        Ok(t) => Some(t),
        Err(_) => {
            warnings.push(format!("missing {}", path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())));
            None
        }
    }
}

/// Summarises a run directory: writes `summary.csv` (one row per phase),
/// `entropy_series.csv` (step, phase, level, entropy, density) and
/// `warnings.txt`. Missing or malformed inputs produce warnings rather
/// than errors. Re-running yields identical files.
pub fn report(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        return Err(HarnessError::Data(format!("missing run directory {}", dir.display())));
    }
    let mut warnings = Vec::new();
    match read_optional(&dir.join(MANIFEST), &mut warnings) {
        Some(m) if manifest_value(&m, "manifest.status").as_deref() != Some("complete") => {
            warnings.push("run is incomplete (manifest status is not `complete`)".into())
        }
        _ => {}
    }

    let mut phases: Vec<PhaseSummary> = Vec::new();
    if let Some(log) = read_optional(&dir.join(TRAIN_LOG), &mut warnings) {
        let mut lines = log.lines();
        if lines.next() != Some(TRAIN_LOG_HEADER) {
            warnings.push(format!("{TRAIN_LOG} has an unexpected header"));
        }
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let parsed = (cols.len() == 11)
                .then(|| {
                    let losses: Option<Vec<f64>> = cols[2..8].iter().map(|c| c.parse().ok()).collect();
                    Some((losses?, cols[8].parse::<f64>().ok()?, cols[9].parse::<u64>().ok()?, cols[10].parse::<u64>().ok()?))
                })
                .flatten();
            let Some((losses, pass, added, removed)) = parsed else {
                warnings.push(format!("{TRAIN_LOG}:{}: malformed row skipped", n + 2));
                continue;
            };
            let idx = match phases.iter().position(|p| p.phase == cols[1]) {
                Some(i) => i,
                None => {
                    phases.push(PhaseSummary {
                        phase: cols[1].to_string(),
                        steps: 0,
                        mean_losses: [0.0; 6],
                        mean_filter_pass_rate: 0.0,
                        links_added: 0,
                        links_removed: 0,
                        last_eval: None,
                    });
                    phases.len() - 1
                }
            };
            let p = &mut phases[idx];
            p.steps += 1;
            for (acc, v) in p.mean_losses.iter_mut().zip(&losses) {
                *acc += v;
            }
            p.mean_filter_pass_rate += pass;
            p.links_added += added;
            p.links_removed += removed;
        }
        for p in &mut phases {
            let n = p.steps as f64;
            p.mean_losses.iter_mut().for_each(|v| *v /= n);
            p.mean_filter_pass_rate /= n;
        }
        if phases.is_empty() {
            warnings.push(format!("{TRAIN_LOG} has no rows"));
        }
    }

    let mut series = String::from("step,phase,level,entropy,density\n");
    if let Some(text) = read_optional(&dir.join(METRICS), &mut warnings) {
        let mut lines = text.lines();
        let levels = lines.next().map_or(0, |h| h.split(',').filter(|c| c.starts_with("H_level_")).count());
        let mut rows = 0;
        for (n, line) in lines.enumerate() {
            let Some(row) = EvalRow::parse_csv(line, levels) else {
                warnings.push(format!("{METRICS}:{}: malformed row skipped", n + 2));
                continue;
            };
            rows += 1;
            for l in 0..levels {
                let _ = writeln!(series, "{},{},{},{},{}", row.step, row.phase, l + 1, fmt_f64(row.entropy[l]), fmt_f64(row.density[l]));
            }
            if let Some(p) = phases.iter_mut().find(|p| p.phase == row.phase) {
                p.last_eval = Some(row);
            }
        }
        if rows == 0 {
            warnings.push(format!("{METRICS} has no rows"));
        }
    }

    let mut summary = String::from(
        "phase,steps,mean_user,mean_item,mean_xtr,mean_reference,mean_kl,mean_total,mean_filter_pass_rate,links_added,links_removed,recall@10,ndcg@10\n",
    );
    for p in &phases {
        let mut cols = vec![p.phase.clone(), p.steps.to_string()];
        cols.extend(p.mean_losses.iter().map(|v| fmt_f64(*v)));
        cols.push(fmt_f64(p.mean_filter_pass_rate));
        cols.push(p.links_added.to_string());
        cols.push(p.links_removed.to_string());
        match &p.last_eval {
            Some(r) => {
                cols.push(fmt_f64(r.recall_at(10)));
                cols.push(fmt_f64(r.ndcg_at(10)));
            }
            None => cols.extend([String::new(), String::new()]),
        }
        let _ = writeln!(summary, "{}", cols.join(","));
    }
    write_file(&dir.join("summary.csv"), &summary)?;
    write_file(&dir.join("entropy_series.csv"), &series)?;
    let warn_text: String = warnings.iter().map(|w| format!("{w}\n")).collect();
    write_file(&dir.join("warnings.txt"), &warn_text)?;
    Ok(Report { phases, warnings })
}

/// Per-level entropy/density of the warm-up assignment next to the
/// current index (top-weight SIDs, or every alias).
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTable {
    pub warmup_entropy: Vec<f64>,
    pub warmup_density: Vec<f64>,
    pub final_entropy: Vec<f64>,
    pub final_density: Vec<f64>,
    pub all_aliases: bool,
}

impl EntropyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,H_warmup,H_final,density_warmup,density_final\n");
        for l in 0..self.warmup_entropy.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                l + 1,
                fmt_f64(self.warmup_entropy[l]),
                fmt_f64(self.final_entropy[l]),
                fmt_f64(self.warmup_density[l]),
                fmt_f64(self.final_density[l])
            );
        }
        out
    }
}

fn load_index(dir: &Path) -> Result<(BeamIndex, CodebookSpec)> {
    let path = require(dir, INDEX)?;
    formats::parse_index(&read_file(&path)?, &path.display().to_string())
}

/// Builds the entropy table of a run and writes it as
/// `entropy_report.csv` (or `entropy_report_all_aliases.csv`).
pub fn entropy_report(dir: &Path, all_aliases: bool) -> Result<EntropyTable> {
    let (index, spec) = load_index(dir)?;
    let sids_path = require(dir, WARMUP_SIDS)?;
    let sids = formats::parse_sids(&read_file(&sids_path)?, &sids_path.display().to_string())?;
    let mut warm = BeamIndex::new(1).map_err(HarnessError::from_core)?;
    for (i, sid) in sids.into_iter().enumerate() {
        spec.validate(&sid).map_err(|e| HarnessError::Data(format!("{}: {e}", sids_path.display())))?;
        warm.insert_link(i as u32, sid, 0.0, 0).map_err(|e| HarnessError::Data(format!("{}: {e}", sids_path.display())))?;
    }
    let (warmup_entropy, warmup_density) = codebook_metrics(&warm, &spec, false)?;
    let (final_entropy, final_density) = codebook_metrics(&index, &spec, all_aliases)?;
    let table = EntropyTable { warmup_entropy, warmup_density, final_entropy, final_density, all_aliases };
    let name = if all_aliases { "entropy_report_all_aliases.csv" } else { "entropy_report.csv" };
    write_file(&dir.join(name), &table.to_csv())?;
    Ok(table)
}

/// Link statistics of a run's index plus churn totals from its log.
pub fn inspect_index(dir: &Path, dump: bool) -> Result<String> {
    let (index, _) = load_index(dir)?;
    let delta_t = RunConfig::from_file(&dir.join(MANIFEST)).ok().map(|c| c.train.index.delta_t);
    let mut out = String::new();
    let _ = writeln!(out, "items {}  links {}  capacity {}  clock {}", index.item_count(), index.link_count(), index.capacity(), index.clock());
    let mut hist = vec![0usize; index.capacity() + 1];
    for item in index.items() {
        hist[index.forward_lookup(item).len()] += 1;
    }
    let warm = index.entries().filter(|e| e.timestamp == 0).count();
    let _ = writeln!(out, "aliases per item:");
    for (n, c) in hist.iter().enumerate().skip(1).filter(|(_, c)| **c > 0) {
        let _ = writeln!(out, "  {n:>3}  {c}");
    }
    let _ = writeln!(out, "links from the warm-up (timestamp 0) {warm}");
    if let Some(dt) = delta_t {
        let stale = index.entries().filter(|e| e.timestamp + dt < index.clock()).count();
        let _ = writeln!(out, "stealable links (older than delta_t = {dt}) {stale}");
    }
    if let Ok(log) = std::fs::read_to_string(dir.join(TRAIN_LOG)) {
        let (mut added, mut removed) = (0u64, 0u64);
        for line in log.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() == 11 {
                added += cols[9].parse::<u64>().unwrap_or(0);
                removed += cols[10].parse::<u64>().unwrap_or(0);
            }
        }
        let _ = writeln!(out, "churn over the run: {added} links added, {removed} removed");
    }
    if dump {
        let _ = writeln!(out, "item\tsid\tweight\ttimestamp");
        for e in index.entries() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.item, e.sid, fmt_f64(e.weight), e.timestamp);
        }
    }
    Ok(out)
}
