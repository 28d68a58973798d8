//! Training and evaluation loops behind the `train` and `eval` subcommands.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mmtl_core::data::{evaluation_suite, training_episodes, Split};
use mmtl_core::meta::{evaluate, Learner, MetricsRecord};
use mmtl_core::model::Model;
use mmtl_core::task::Episode;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, Run, RunConfig};
use crate::metrics_log::{timings_path, JsonLines, MetricsLine, TimingLine};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(ConfigError),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => write!(f, "{m}"),
            CliError::Config(e) => write!(f, "invalid config: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<mmtl_core::Error> for CliError {
    fn from(e: mmtl_core::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Failed(format!("i/o error: {e}"))
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmtl";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iteration: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Weighted outer loss of every step taken, keyed by iteration.
    pub losses: Vec<(u64, f64)>,
}

fn write_eval(
    metrics: &mut JsonLines,
    timings: &mut JsonLines,
    run_id: &str,
    iter: u64,
    phase: &str,
    variant: &str,
    records: &[MetricsRecord],
) -> io::Result<()> {
    for r in records {
        metrics.metrics(MetricsLine::from_eval(run_id, iter, phase, variant, r))?;
        timings.write(&TimingLine {
            run_id: run_id.into(),
            iter,
            phase: phase.into(),
            task_id: r.task_id.clone(),
            adapt_ms: r.adapt_ms,
            infer_ms: r.infer_ms,
        })?;
    }
    Ok(())
}

/// Restores a learner from `ckpt`, warning when it was written by a
/// different configuration.
pub fn resume_learner(run: &Run, ckpt: &Checkpoint) -> Result<Learner, CliError> {
    if ckpt.digest != run.config.digest() {
        log::warn!("checkpoint was written by a different configuration; resuming anyway");
    }
    let model = Model::new(run.model.clone(), run.config.seed)?;
    let mut learner = Learner::new(model, run.hp.clone())?;
    ckpt.restore(&mut learner).map_err(CliError::Failed)?;
    Ok(learner)
}

pub fn train(run: &Run, opts: &TrainOptions) -> Result<TrainSummary, CliError> {
    let cfg = &run.config;
    fs::create_dir_all(&cfg.output_dir)?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    let metrics_path = cfg.output_dir.join(METRICS_FILE);
    let canonical = cfg.canonical();
    let digest = cfg.digest();

    let mut learner = match &opts.resume {
        Some(path) => resume_learner(run, &Checkpoint::load(path)?)?,
        None => Learner::new(Model::new(run.model.clone(), cfg.seed)?, run.hp.clone())?,
    };
    let append = opts.resume.is_some();
    let mut metrics = JsonLines::open(&metrics_path, append)?;
    let mut timings = JsonLines::open(&timings_path(&metrics_path), append)?;

    let pretrain = cfg.train.pretrain_iterations;
    let total = pretrain + cfg.train.meta_iterations;
    let domain = run.domain_sources();
    let variant = run.hp.variant.name();
    let mut suite: Option<Vec<Episode>> = None;
    let mut losses = Vec::new();
    let mut taken = 0;

    while learner.iteration < total && opts.max_steps.is_none_or(|m| taken < m) {
        let it = learner.iteration;
        let (phase, record) = if it < pretrain {
            let eps = training_episodes(&run.world, &domain, it, run.hp.outer_batch)?;
            ("pretrain", learner.pretrain_step(&eps)?)
        } else {
            let eps = training_episodes(&run.world, &run.sources, it, run.hp.outer_batch)?;
            ("train", learner.meta_step(&eps)?)
        };
        taken += 1;
        let done = learner.iteration;
        losses.push((done, record.weighted));
        for line in MetricsLine::from_step(&cfg.run_id, done, phase, variant, &record) {
            metrics.metrics(line)?;
        }

        let every = cfg.train.eval_every;
        if (every > 0 && done % every == 0) || done == total {
            if suite.is_none() {
                suite = Some(evaluation_suite(&run.world, &run.sources, Split::Val, cfg.train.eval_episodes, cfg.seed)?);
            }
            let records = evaluate(&learner.model, &learner.hp, suite.as_ref().unwrap())?;
            write_eval(&mut metrics, &mut timings, &cfg.run_id, done, "val", variant, &records)?;
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && done % every == 0 {
            Checkpoint::capture(&mut learner, &canonical, digest).save(&checkpoint)?;
        }
    }
    Checkpoint::capture(&mut learner, &canonical, digest).save(&checkpoint)?;
    Ok(TrainSummary {
        iteration: learner.iteration,
        checkpoint,
        metrics: metrics_path,
        losses,
    })
}

/// Rebuilds the run and model stored in a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Run, Model, Checkpoint), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let config = RunConfig::parse(&ckpt.config)?;
    if config.digest() != ckpt.digest {
        log::warn!("checkpoint config digest does not match its embedded config");
    }
    let run = config.build()?;
    let mut model = Model::new(run.model.clone(), config.seed)?;
    model.load_named(&ckpt.tensors)?;
    Ok((run, model, ckpt))
}

pub fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split `{other}`; expected train, val or test"))),
    }
}

/// Scores a checkpoint on a seeded held-out suite and writes the records.
pub fn eval_checkpoint(path: &Path, split: Split, suite_seed: u64, episodes: Option<usize>, out: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let (run, model, ckpt) = load_checkpoint(path)?;
    let per_task = episodes.unwrap_or(run.config.train.eval_episodes);
    if per_task == 0 {
        return Err(CliError::Usage("--episodes must be ≥ 1".into()));
    }
    let suite = evaluation_suite(&run.world, &run.sources, split, per_task, suite_seed)?;
    let records = evaluate(&model, &run.hp, &suite)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut metrics = JsonLines::open(out, false)?;
    let mut timings = JsonLines::open(&timings_path(out), false)?;
    write_eval(&mut metrics, &mut timings, &run.config.run_id, ckpt.iteration, "eval", run.hp.variant.name(), &records)?;
    Ok(records)
}
