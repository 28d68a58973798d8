use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmtl_cli::checkpoint::{Checkpoint, CheckpointError};
use mmtl_cli::config::RunConfig;
use mmtl_cli::driver::{self, TrainOptions};
use mmtl_core::data::training_episodes;
use mmtl_core::meta::Learner;
use mmtl_core::model::Model;
use mmtl_core::seed;

fn mmtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmtl")).args(args).output().expect("binary runs")
}

fn tiny_config(out: &Path, variant: &str) -> String {
    format!(
        r#"
run_id = "tiny"
seed = 5
variant = "{variant}"
output_dir = "{}"
model.blocks = 2
model.channels = 4
model.input = [3, 16, 16]
hp.alpha = 0.1
hp.beta = 0.01
hp.gamma = 0.01
hp.inner_steps = 2
hp.outer_batch = 2
train.pretrain_iterations = 2
train.meta_iterations = 4
train.eval_every = 3
train.eval_episodes = 2
tasks.cls.kind = "classification"
tasks.cls.ways = 3
tasks.cls.queries = 3
tasks.depth.kind = "depth"
tasks.vp.kind = "vanishing_point"
"#,
        out.display()
    )
}

fn write_config(dir: &Path, name: &str, variant: &str) -> PathBuf {
    let out = dir.join(format!("{name}-out"));
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, tiny_config(&out, variant)).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_smoke_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", "am");
    let o = mmtl(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("run-out");
    assert!(out.join("checkpoint.mmtl").exists());
    let lines = mmtl_cli::metrics_log::read_metrics(&out.join("metrics.jsonl")).unwrap();
    // One line per task for each of the two validation passes.
    let val: Vec<_> = lines.iter().filter(|l| l.phase == "val").collect();
    assert_eq!(val.len(), 6);
    assert_eq!(val.iter().filter(|l| l.iter == 6).count(), 3);
    let text = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    for line in text.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
        assert!(!line.contains("NaN") && !line.contains("inf"));
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(mmtl(&["bogus"]).status.code(), Some(2));
    assert_eq!(mmtl(&["train", "--nope"]).status.code(), Some(2));
    assert_eq!(mmtl(&[]).status.code(), Some(2));
    let help = mmtl(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for sub in ["train", "eval", "gradcheck", "attn-analyze", "param-count"] {
        assert!(stdout(&help).contains(sub), "help lists {sub}");
    }
}

#[test]
fn invalid_config_exits_one_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad", "am");
    let text = fs::read_to_string(&cfg).unwrap().replace("hp.inner_steps = 2", "hp.inner_steps = 2\nhp.alhpa = 1.0");
    fs::write(&cfg, text).unwrap();
    let o = mmtl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alhpa"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "maml", "maml_full");
    let o = mmtl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("variant: maml_full needs exactly one task"), "{}", stderr(&o));
}

#[test]
fn runs_and_evaluations_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let cfg = write_config(dir.path(), "same", "pam");
        let o = mmtl(&["train", "--config", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = dir.path().join("same-out");
        metrics.push(fs::read(out.join("metrics.jsonl")).unwrap());
        let ckpt = out.join("checkpoint.mmtl");
        let eval = dir.path().join(format!("eval-{name}.jsonl"));
        let o = mmtl(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--seed", "7", "--out", eval.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(metrics[0], metrics[1]);
    let a = fs::read(dir.path().join("eval-a.jsonl")).unwrap();
    let b = fs::read(dir.path().join("eval-b.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn interrupted_run_resumes_on_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let full = RunConfig::parse(&tiny_config(&dir.path().join("full"), "am")).unwrap().build().unwrap();
    let part = RunConfig::parse(&tiny_config(&dir.path().join("part"), "am")).unwrap().build().unwrap();
    let whole = driver::train(&full, &TrainOptions::default()).unwrap();
    let first = driver::train(&part, &TrainOptions { resume: None, max_steps: Some(3) }).unwrap();
    assert_eq!(first.iteration, 3);
    let rest = driver::train(
        &part,
        &TrainOptions {
            resume: Some(first.checkpoint.clone()),
            max_steps: None,
        },
    )
    .unwrap();
    let resumed: Vec<_> = first.losses.iter().chain(&rest.losses).copied().collect();
    assert_eq!(resumed.len(), whole.losses.len());
    for ((i, a), (j, b)) in whole.losses.iter().zip(&resumed) {
        assert_eq!(i, j);
        assert_eq!(a.to_bits(), b.to_bits(), "step {i}");
    }
    assert_eq!(fs::read(&whole.metrics).unwrap(), fs::read(&rest.metrics).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact_for_100_models() {
    let variants = ["baseline", "am", "pam"];
    for i in 0..100u64 {
        let r = seed::derive(&[i]);
        let variant = variants[(r % 3) as usize];
        let channels = 1 + (r >> 8) % 4;
        let dir = Path::new("/unused");
        let text = tiny_config(dir, variant)
            .replace("model.channels = 4", &format!("model.channels = {channels}"))
            .replace("seed = 5", &format!("seed = {}", r >> 16));
        let config = RunConfig::parse(&text).unwrap();
        let run = config.build().unwrap();
        let mut learner = Learner::new(Model::new(run.model.clone(), config.seed).unwrap(), run.hp.clone()).unwrap();
        if i % 10 == 0 {
            // Populate optimizer moments too.
            let eps = training_episodes(&run.world, &run.sources, 0, 1).unwrap();
            learner.meta_step(&eps).unwrap();
        }
        let ckpt = Checkpoint::capture(&mut learner, &config.canonical(), config.digest());
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.iteration, ckpt.iteration);
        assert_eq!(back.config, ckpt.config);
        for ((na, a), (nb, b)) in ckpt.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b), "{na}");
        }
        let mut fresh = Learner::new(Model::new(run.model.clone(), config.seed + 1).unwrap(), run.hp.clone()).unwrap();
        back.restore(&mut fresh).unwrap();
        assert!(fresh.model.backbone.bit_eq(&learner.model.backbone));
        for (a, b) in fresh.model.heads.iter().zip(&learner.model.heads) {
            assert!(a.bit_eq(b));
        }
        for (a, b) in fresh.model.attention.iter().zip(&learner.model.attention) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(fresh.optim, learner.optim);
    }
}

fn saved_checkpoint(dir: &Path) -> (PathBuf, Vec<u8>) {
    let run = RunConfig::parse(&tiny_config(&dir.join("ck"), "am")).unwrap().build().unwrap();
    let summary = driver::train(&run, &TrainOptions { resume: None, max_steps: Some(1) }).unwrap();
    let bytes = fs::read(&summary.checkpoint).unwrap();
    (summary.checkpoint, bytes)
}

#[test]
fn corrupted_checkpoints_are_rejected_with_the_defect() {
    let dir = tempfile::tempdir().unwrap();
    let (path, bytes) = saved_checkpoint(dir.path());

    let mut bad = bytes.clone();
    bad[1] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
    fs::write(&path, &bad).unwrap();
    let o = mmtl(&["eval", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(9)));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Truncated(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Malformed(_))));
}

#[test]
fn mismatched_architecture_lists_tensor_names() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_checkpoint(dir.path());
    let ckpt = Checkpoint::load(&path).unwrap();
    let other = RunConfig::parse(&tiny_config(dir.path(), "baseline").replace("model.blocks = 2", "model.blocks = 1"))
        .unwrap()
        .build()
        .unwrap();
    let mut learner = Learner::new(Model::new(other.model, 0).unwrap(), other.hp).unwrap();
    let err = ckpt.restore(&mut learner).unwrap_err();
    assert!(err.contains("extra tensors"), "{err}");
    assert!(err.contains("backbone.block1.conv.weight"), "{err}");
    assert!(err.contains("attention.cls."), "{err}");
}

#[test]
fn attention_analysis_with_zero_steps_stays_at_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_checkpoint(dir.path());
    let report = mmtl_cli::attn_analyze(&path, "cls", 1, 0, 0, 0.01, None).unwrap();
    assert!(report.optimized.iter().all(|m| *m == 1.0));
    assert_eq!(report.loss_optimized, report.loss_identity);
    let at_identity = report.predicted.iter().filter(|m| **m == 1.0).count();
    assert_eq!(report.agreement, at_identity as f64 / report.predicted.len() as f64);

    let table = dir.path().join("w.tsv");
    let o = mmtl(&[
        "attn-analyze",
        "--checkpoint",
        path.to_str().unwrap(),
        "--task",
        "depth",
        "--steps",
        "3",
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(&table).unwrap();
    assert!(tsv.starts_with("block\tchannel\tpredicted\toptimized"));
    assert_eq!(tsv.lines().count(), 1 + 2 * 4);
}

#[test]
fn planting_noise_rewires_block_zero_only() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_checkpoint(dir.path());
    let (_, mut model, _) = driver::load_checkpoint(&path).unwrap();
    let before = model.backbone.get("block0.conv.weight").unwrap().clone();
    let fed = mmtl_cli::analysis::plant_noise(&mut model, 2, 1).unwrap();
    assert_eq!(fed, vec![0]);
    let after = model.backbone.get("block0.conv.weight").unwrap();
    let filter = |t: &mmtl_core::Tensor, o: usize| t.data()[o * 27..(o + 1) * 27].to_vec();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for o in 0..4 {
        let (a, b) = (filter(&before, o), filter(after, o));
        assert!((norm(&a) - norm(&b)).abs() < 1e-12);
        let reads_noise = b[18..].iter().any(|v| *v != 0.0);
        let reads_image = b[..18].iter().any(|v| *v != 0.0);
        assert_eq!((reads_noise, reads_image), (o == 0, o != 0));
    }
}

#[test]
fn param_count_and_plot() {
    let o = mmtl(&["param-count"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let ratio: f64 = text.lines().last().unwrap().trim_start_matches("ratio ").parse().unwrap();
    assert!((1.01..=1.2).contains(&ratio), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p", "baseline");
    assert!(mmtl(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let files = mmtl_cli::plot(&dir.path().join("p-out/metrics.jsonl"), &dir.path().join("plots")).unwrap();
    assert!(files.iter().any(|f| f.ends_with("val_cls.tsv")));
    let curve = fs::read_to_string(dir.path().join("plots/val_cls.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn example_config_is_valid() {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/example.toml")).unwrap();
    let run = RunConfig::parse(&text).unwrap().build().unwrap();
    assert_eq!(run.model.tasks.len(), 4);
}
