//! JSON-lines metrics, one flushed record per line.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmtl_core::meta::{LossRecord, MetricsRecord};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub run_id: String,
    pub iter: u64,
    /// `pretrain`, `train`, `val` or `eval`.
    pub phase: String,
    pub task_id: String,
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nil: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[serde(default)]
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricsLine {
    /// Drops non-finite numbers, naming them in `error` instead.
    fn sanitize(mut self) -> MetricsLine {
        let mut bad = Vec::new();
        for (name, v) in [
            ("loss", &mut self.loss),
            ("accuracy", &mut self.accuracy),
            ("ci", &mut self.ci),
            ("mse", &mut self.mse),
            ("threshold_acc", &mut self.threshold_acc),
            ("nil", &mut self.nil),
            ("kl", &mut self.kl),
        ] {
            if v.is_some_and(|x| !x.is_finite()) {
                bad.push(name);
                *v = None;
            }
        }
        if !bad.is_empty() {
            let msg = format!("non-finite {}", bad.join(", "));
            self.error = Some(match self.error.take() {
                Some(e) => format!("{e}; {msg}"),
                None => msg,
            });
        }
        self
    }

    pub fn from_eval(run_id: &str, iter: u64, phase: &str, variant: &str, r: &MetricsRecord) -> MetricsLine {
        MetricsLine {
            run_id: run_id.into(),
            iter,
            phase: phase.into(),
            task_id: r.task_id.clone(),
            variant: variant.into(),
            loss: (r.episodes > 0).then_some(r.loss),
            accuracy: r.accuracy,
            ci: r.ci,
            mse: r.mse,
            threshold_acc: r.threshold_acc,
            nil: r.nil,
            kl: None,
            episodes: Some(r.episodes),
            failures: r.failures,
            error: (r.episodes == 0).then(|| "every episode diverged".to_string()),
        }
    }

    /// One line per task of a training step.
    pub fn from_step(run_id: &str, iter: u64, phase: &str, variant: &str, rec: &LossRecord) -> Vec<MetricsLine> {
        let mut lines: Vec<MetricsLine> = rec
            .tasks
            .iter()
            .map(|t| MetricsLine {
                run_id: run_id.into(),
                iter,
                phase: phase.into(),
                task_id: t.task_id.clone(),
                variant: variant.into(),
                loss: Some(t.test_loss),
                kl: t.kl,
                episodes: Some(t.episodes),
                failures: rec.failures.iter().filter(|f| f.task_id == t.task_id).count(),
                ..Default::default()
            })
            .collect();
        // Tasks whose every episode was dropped still get a line.
        for f in &rec.failures {
            if !lines.iter().any(|l| l.task_id == f.task_id) {
                lines.push(MetricsLine {
                    run_id: run_id.into(),
                    iter,
                    phase: phase.into(),
                    task_id: f.task_id.clone(),
                    variant: variant.into(),
                    failures: rec.failures.iter().filter(|g| g.task_id == f.task_id).count(),
                    error: Some(f.message.clone()),
                    ..Default::default()
                });
            }
        }
        lines
    }
}

/// Wall-clock figures kept apart from the metrics so those stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingLine {
    pub run_id: String,
    pub iter: u64,
    pub phase: String,
    pub task_id: String,
    pub adapt_ms: f64,
    pub infer_ms: f64,
}

/// Append-only JSON-lines writer.
pub struct JsonLines {
    path: PathBuf,
    file: File,
}

impl JsonLines {
    /// Opens `path`, truncating unless `append`.
    pub fn open(path: &Path, append: bool) -> io::Result<JsonLines> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(JsonLines {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }

    pub fn metrics(&mut self, line: MetricsLine) -> io::Result<()> {
        self.write(&line.sanitize())
    }
}

pub fn read_metrics(path: &Path) -> io::Result<Vec<MetricsLine>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Sibling path `<stem>.timings.jsonl`.
pub fn timings_path(metrics: &Path) -> PathBuf {
    let stem = metrics.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    metrics.with_file_name(format!("{stem}.timings.jsonl"))
}
