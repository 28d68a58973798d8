//! Command-line front end: configuration, checkpoints, metrics, training
//! and evaluation drivers, and the attention-weight analysis.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod driver;
pub mod metrics_log;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use mmtl_core::data::{evaluation_suite, Split};
use mmtl_core::gradcheck::{run_composite_checks, run_primitive_checks, CheckOutcome};
use mmtl_core::meta::Variant;
use mmtl_core::model::{AttentionConfig, AttentionVariant, BackboneConfig, Model, ModelConfig, ParamCounts};
use mmtl_core::task::{AdaptationMode, TaskKind, TaskSpec};

use config::RunConfig;
use driver::{CliError, TrainOptions};
use metrics_log::read_metrics;

#[derive(Parser, Debug)]
#[command(name = "mmtl", version, about = "Multi-task meta-learning with attention modulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain and meta-train a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Score a checkpoint on seeded held-out episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the evaluation suite.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: String,
        /// Episodes per task; the config's eval_episodes by default.
        #[arg(long)]
        episodes: Option<usize>,
        /// Metrics output; `eval.jsonl` beside the checkpoint by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the meta-objective.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Fit channel multipliers directly and compare with predicted ones.
    AttnAnalyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Index into the seeded test suite.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Rewire this many block-0 channels to read only a noise input.
        #[arg(long)]
        plant_noise: Option<usize>,
        /// Per-channel table (tab-separated).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter counts with and without attention modules.
    ParamCount {
        /// Count the model of this config instead of the reference one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Convert a metrics file into per-task tab-separated curves.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config, resume, steps } => {
            let run = RunConfig::load(&config)?.build()?;
            let summary = driver::train(&run, &TrainOptions { resume, max_steps: steps })?;
            println!(
                "trained to iteration {}; checkpoint {}; metrics {}",
                summary.iteration,
                summary.checkpoint.display(),
                summary.metrics.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            seed,
            split,
            episodes,
            out,
        } => {
            let split = driver::parse_split(&split)?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name("eval.jsonl"));
            let records = driver::eval_checkpoint(&checkpoint, split, seed, episodes, &out)?;
            for r in &records {
                let mut line = format!("{}: loss {:.6}", r.task_id, r.loss);
                if let (Some(a), Some(ci)) = (r.accuracy, r.ci) {
                    let _ = write!(line, ", accuracy {:.4} ± {:.4}", a, ci);
                }
                if let Some(m) = r.mse {
                    let _ = write!(line, ", mse {m:.6}");
                }
                println!("{line}");
            }
            println!("metrics written to {}", out.display());
            Ok(())
        }
        Command::Gradcheck { seeds } => gradcheck(&seeds),
        Command::AttnAnalyze {
            checkpoint,
            task,
            episode,
            seed,
            steps,
            lr,
            plant_noise,
            out,
        } => {
            let report = attn_analyze(&checkpoint, &task, episode, seed, steps, lr, plant_noise)?;
            print!("{}", report.summary());
            if let Some(path) = out {
                fs::write(&path, report.to_tsv())?;
                println!("table written to {}", path.display());
            }
            Ok(())
        }
        Command::ParamCount { config } => {
            let model = match config {
                Some(path) => counting_model(&RunConfig::load(&path)?.build()?.model),
                None => reference_model(),
            };
            let counts = Model::new(model, 0)?.count_parameters();
            print!("{}", param_table(&counts));
            Ok(())
        }
        Command::Plot { metrics, out_dir } => {
            let files = plot(&metrics, &out_dir)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn gradcheck(seeds: &[u64]) -> Result<(), CliError> {
    let mut outcomes: Vec<CheckOutcome> = run_primitive_checks(seeds)?;
    for v in [Variant::Baseline, Variant::Am, Variant::Pam] {
        outcomes.extend(run_composite_checks(v, seeds)?);
    }
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("{} checks, {} failed", outcomes.len(), failed);
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

/// Loads a checkpoint, optionally plants noise, and runs the analysis on
/// one test episode of `task`.
pub fn attn_analyze(
    checkpoint: &std::path::Path,
    task: &str,
    episode: usize,
    seed: u64,
    steps: usize,
    lr: f64,
    plant_noise: Option<usize>,
) -> Result<analysis::AttentionReport, CliError> {
    let (run, mut model, _) = driver::load_checkpoint(checkpoint)?;
    let source = run
        .sources
        .iter()
        .find(|s| s.task.id == task)
        .ok_or_else(|| CliError::Usage(format!("unknown task `{task}`")))?;
    let mut world = run.world.clone();
    let mut noise_fed = Vec::new();
    if let Some(k) = plant_noise {
        let channel = world.noise_channel.unwrap_or(run.model.backbone.input.0 - 1);
        world.noise_channel = Some(channel);
        noise_fed = analysis::plant_noise(&mut model, channel, k)?;
    }
    let suite = evaluation_suite(&world, std::slice::from_ref(source), Split::Test, episode + 1, seed)?;
    let before = model.named_tensors();
    let mut report = analysis::attention_optimality(&model, &run.hp, &suite[episode], steps, lr)?;
    let unchanged = before.iter().zip(model.named_tensors()).all(|((_, a), (_, b))| a.bit_eq(&b));
    if !unchanged {
        return Err(CliError::Failed("model parameters changed during the analysis".into()));
    }
    report.noise_fed = noise_fed;
    Ok(report)
}

/// B=4, C=32 on 84×84 RGB with one 5-way classification task.
pub fn reference_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::new(4, 32, (3, 84, 84)),
        tasks: vec![TaskSpec::new(
            "classification",
            TaskKind::Classification { ways: 5 },
            AdaptationMode::TaskAdaptation,
        )],
        attention: Some(AttentionConfig::new(AttentionVariant::Deterministic)),
    }
}

/// The same model with attention modules, so both totals can be counted.
pub fn counting_model(model: &ModelConfig) -> ModelConfig {
    let mut m = model.clone();
    if m.attention.is_none() {
        m.attention = Some(AttentionConfig::new(AttentionVariant::Deterministic));
    }
    m
}

pub fn param_table(c: &ParamCounts) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<32}{:>12}", "group", "parameters");
    let _ = writeln!(s, "{:<32}{:>12}", "backbone", c.backbone);
    for (id, n) in &c.heads {
        let _ = writeln!(s, "{:<32}{:>12}", format!("head.{id}"), n);
    }
    for ((id, n), (_, enc)) in c.attention.iter().zip(&c.label_encoders) {
        let _ = writeln!(s, "{:<32}{:>12}", format!("attention.{id}"), n);
        if *enc > 0 {
            let _ = writeln!(s, "{:<32}{:>12}", format!("  of which label encoder"), enc);
        }
    }
    let _ = writeln!(s, "{:<32}{:>12}", "total without attention", c.without_attention());
    let _ = writeln!(s, "{:<32}{:>12}", "total with attention", c.with_attention());
    let _ = writeln!(s, "ratio {:.6}", c.ratio());
    s
}

/// Writes `<phase>_<task>.tsv` curves and returns their paths.
pub fn plot(metrics: &std::path::Path, out_dir: &std::path::Path) -> Result<Vec<PathBuf>, CliError> {
    let lines = read_metrics(metrics)?;
    fs::create_dir_all(out_dir)?;
    let mut groups: BTreeMap<(String, String), String> = BTreeMap::new();
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for l in &lines {
        let body = groups
            .entry((l.phase.clone(), l.task_id.clone()))
            .or_insert_with(|| "iter\tloss\taccuracy\tmse\tthreshold_acc\tkl\n".to_string());
        let _ = writeln!(
            body,
            "{}\t{}\t{}\t{}\t{}\t{}",
            l.iter,
            cell(l.loss),
            cell(l.accuracy),
            cell(l.mse),
            cell(l.threshold_acc),
            cell(l.kl)
        );
    }
    let mut out = Vec::new();
    for ((phase, task), body) in groups {
        let path = out_dir.join(format!("{phase}_{task}.tsv"));
        fs::write(&path, body)?;
        out.push(path);
    }
    Ok(out)
}
