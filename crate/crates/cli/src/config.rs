//! Run configuration: flat `key = value` TOML with dotted sections.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mmtl_core::data::{DenseKind, Generator, ImageDirectory, Split, SyntheticWorld, TaskSource};
use mmtl_core::meta::{GradOrder, HyperParams, Variant};
use mmtl_core::model::{dense_output_extent, AttentionConfig, BackboneConfig, ModelConfig};
use mmtl_core::task::{AdaptationMode, HeadSpec, TaskKind, TaskSpec};

/// A configuration problem, reported with the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(field: impl Into<String>, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        field: field.into(),
        message: message.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub blocks: usize,
    pub channels: usize,
    /// `[channels, height, width]` of inputs.
    pub input: [usize; 3],
    pub attention_width: usize,
    pub attention_depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            blocks: 4,
            channels: 32,
            input: [3, 64, 64],
            attention_width: 16,
            attention_depth: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub inner_steps: usize,
    pub outer_batch: usize,
    /// `first_order` or `exact`.
    pub grad_order: String,
    pub parallel: bool,
}

impl Default for HpSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        HpSection {
            alpha: hp.alpha,
            beta: hp.beta,
            gamma: hp.gamma,
            inner_steps: hp.inner_steps,
            outer_batch: hp.outer_batch,
            grad_order: "first_order".into(),
            parallel: hp.parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Joint steps on domain-adaptation tasks before meta-training.
    pub pretrain_iterations: u64,
    pub meta_iterations: u64,
    /// Validation cadence in steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    /// Validation episodes per task.
    pub eval_episodes: usize,
    /// Checkpoint cadence in steps; 0 writes only after the last step.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pretrain_iterations: 0,
            meta_iterations: 100,
            eval_every: 0,
            eval_episodes: 12,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `synthetic` or `directory`.
    pub source: String,
    pub path: Option<PathBuf>,
    /// World seed; the run seed when absent.
    pub seed: Option<u64>,
    pub classes: [usize; 3],
    pub subtasks: [usize; 3],
    pub noise_channel: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".into(),
            path: None,
            seed: None,
            classes: [32, 8, 12],
            subtasks: [40, 10, 12],
            noise_channel: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// `classification`, `depth`, `normals` or `vanishing_point`.
    pub kind: String,
    /// `task` or `domain`; classification defaults to `task`, the rest to `domain`.
    pub mode: Option<String>,
    #[serde(default = "unit_weight")]
    pub loss_weight: f64,
    pub ways: Option<usize>,
    pub shots: Option<usize>,
    pub queries: Option<usize>,
    pub support: Option<usize>,
    pub query: Option<usize>,
    /// Filters per upsampling block of a dense head.
    pub filters: Option<usize>,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    /// `baseline`, `am`, `pam` or `maml_full`.
    pub variant: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub hp: HpSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    pub tasks: IndexMap<String, TaskSection>,
}

/// Everything a run needs, resolved from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub model: ModelConfig,
    pub hp: HyperParams,
    pub world: SyntheticWorld,
    pub sources: Vec<TaskSource>,
}

impl Run {
    pub fn domain_sources(&self) -> Vec<TaskSource> {
        self.sources
            .iter()
            .filter(|s| s.task.mode == AdaptationMode::DomainAdaptation)
            .cloned()
            .collect()
    }
}

fn positive(field: String, v: Option<usize>, default: usize) -> Result<usize, ConfigError> {
    match v {
        Some(0) => err(field, "must be ≥ 1"),
        Some(n) => Ok(n),
        None => Ok(default),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError {
            field: String::new(),
            message: e.to_string().trim_end().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            field: String::new(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        RunConfig::parse(&text)
    }

    /// Canonical text used for the checkpoint digest and embedded copy.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    fn task(&self, id: &str, t: &TaskSection, dense_hw: (usize, usize)) -> Result<TaskSource, ConfigError> {
        let key = |k: &str| format!("tasks.{id}.{k}");
        let (kind, default_mode) = match t.kind.as_str() {
            "classification" => (TaskKind::Classification { ways: t.ways.unwrap_or(5) }, AdaptationMode::TaskAdaptation),
            "depth" => (TaskKind::DenseRegression { channels: 1 }, AdaptationMode::DomainAdaptation),
            "normals" => (TaskKind::DenseRegression { channels: 3 }, AdaptationMode::DomainAdaptation),
            "vanishing_point" => (TaskKind::VectorRegression { dim: 2 }, AdaptationMode::DomainAdaptation),
            other => {
                return err(
                    key("kind"),
                    format!("unknown kind `{other}`; expected classification, depth, normals or vanishing_point"),
                )
            }
        };
        let mode = match t.mode.as_deref() {
            None => default_mode,
            Some("task") => AdaptationMode::TaskAdaptation,
            Some("domain") => AdaptationMode::DomainAdaptation,
            Some(other) => return err(key("mode"), format!("unknown mode `{other}`; expected task or domain")),
        };
        if !(t.loss_weight > 0.0) || !t.loss_weight.is_finite() {
            return err(key("loss_weight"), "must be a positive number");
        }
        let classification = matches!(kind, TaskKind::Classification { .. });
        for (name, set) in [("ways", t.ways), ("shots", t.shots), ("queries", t.queries)] {
            if !classification && set.is_some() {
                return err(key(name), "only valid for classification tasks");
            }
        }
        for (name, set) in [("support", t.support), ("query", t.query)] {
            if classification && set.is_some() {
                return err(key(name), "classification uses shots and queries");
            }
        }
        if t.filters.is_some() && !matches!(kind, TaskKind::DenseRegression { .. }) {
            return err(key("filters"), "only valid for depth and normals tasks");
        }
        if classification && mode == AdaptationMode::DomainAdaptation {
            return err(key("mode"), "classification must use task adaptation");
        }
        let mut spec = TaskSpec::new(id, kind, mode);
        if let (Some(f), HeadSpec::ConvTranspose { out_channels, .. }) = (t.filters, spec.head) {
            if f == 0 {
                return err(key("filters"), "must be ≥ 1");
            }
            spec.head = HeadSpec::ConvTranspose { filters: f, out_channels };
        }
        let generator = match kind {
            TaskKind::Classification { ways } => {
                if ways < 2 {
                    return err(key("ways"), "must be ≥ 2");
                }
                let shots = positive(key("shots"), t.shots, 1)?;
                let queries = positive(key("queries"), t.queries, 15)?;
                match self.data.source.as_str() {
                    "directory" => {
                        let path = self.data.path.clone().ok_or_else(|| ConfigError {
                            field: "data.path".into(),
                            message: "required when data.source = \"directory\"".into(),
                        })?;
                        let [c, h, w] = self.model.input;
                        let source = ImageDirectory::open(&path, (c, h, w)).map_err(|e| ConfigError {
                            field: "data.path".into(),
                            message: e.to_string(),
                        })?;
                        Generator::Directory {
                            source: Arc::new(source),
                            ways,
                            shots,
                            queries,
                        }
                    }
                    _ => {
                        let pool = |s: Split| self.data.classes[s.index()];
                        for s in [Split::Train, Split::Val, Split::Test] {
                            if pool(s) < ways {
                                return err("data.classes", format!("{} split has fewer than {ways} classes", s.name()));
                            }
                        }
                        Generator::Classification { ways, shots, queries }
                    }
                }
            }
            _ if self.data.source == "directory" => {
                return err(key("kind"), "directory data only provides classification tasks");
            }
            TaskKind::DenseRegression { channels } => {
                if dense_hw.0 < 8 || dense_hw.1 < 8 {
                    return err(key("kind"), format!("dense output {}×{} is too small", dense_hw.0, dense_hw.1));
                }
                Generator::Dense {
                    kind: if channels == 1 { DenseKind::Depth } else { DenseKind::Normals },
                    support: positive(key("support"), t.support, 10)?,
                    query: positive(key("query"), t.query, 15)?,
                }
            }
            TaskKind::VectorRegression { .. } => Generator::VanishingPoint {
                support: positive(key("support"), t.support, 10)?,
                query: positive(key("query"), t.query, 15)?,
            },
        };
        spec.validate().map_err(|e| ConfigError {
            field: format!("tasks.{id}"),
            message: e.to_string(),
        })?;
        Ok(TaskSource { task: spec, generator })
    }

    /// Validates every field and resolves the run.
    pub fn build(&self) -> Result<Run, ConfigError> {
        if self.run_id.is_empty() {
            return err("run_id", "must not be empty");
        }
        let variant = Variant::parse(&self.variant).map_err(|_| ConfigError {
            field: "variant".into(),
            message: format!("unknown variant `{}`; expected baseline, am, pam or maml_full", self.variant),
        })?;
        let m = &self.model;
        if m.blocks == 0 || m.channels == 0 {
            return err("model", "blocks and channels must be ≥ 1");
        }
        let [c, h, w] = m.input;
        let backbone = BackboneConfig::new(m.blocks, m.channels, (c, h, w));
        backbone.validate().map_err(|e| ConfigError {
            field: "model.input".into(),
            message: e.to_string(),
        })?;
        let attention = variant.attention().map(|v| AttentionConfig {
            variant: v,
            width: m.attention_width,
            depth: m.attention_depth,
        });
        if let Some(a) = &attention {
            a.validate().map_err(|e| ConfigError {
                field: "model.attention_width".into(),
                message: e.to_string(),
            })?;
        }

        match self.data.source.as_str() {
            "synthetic" | "directory" => {}
            other => return err("data.source", format!("unknown source `{other}`; expected synthetic or directory")),
        }
        if let Some(n) = self.data.noise_channel {
            if n >= c {
                return err("data.noise_channel", format!("channel {n} out of range for {c} input channels"));
            }
        }
        if self.tasks.is_empty() {
            return err("tasks", "at least one task is required");
        }
        let dense_hw = dense_output_extent(&backbone);
        let sources = self
            .tasks
            .iter()
            .map(|(id, t)| self.task(id, t, dense_hw))
            .collect::<Result<Vec<_>, _>>()?;
        let has_subtasks = sources
            .iter()
            .any(|s| matches!(s.generator, Generator::Dense { .. } | Generator::VanishingPoint { .. }));
        if has_subtasks && self.data.subtasks.iter().any(|n| *n == 0) {
            return err("data.subtasks", "every split needs at least one subtask");
        }

        if variant == Variant::MamlFull {
            if sources.len() != 1 {
                return err("variant", "maml_full needs exactly one task");
            }
            if sources[0].task.mode != AdaptationMode::TaskAdaptation {
                return err("variant", "maml_full needs a task-adaptation task");
            }
        }
        let domain = sources.iter().any(|s| s.task.mode == AdaptationMode::DomainAdaptation);
        if self.train.pretrain_iterations > 0 && !domain {
            return err("train.pretrain_iterations", "no domain-adaptation task to pretrain");
        }
        if self.train.eval_episodes == 0 {
            return err("train.eval_episodes", "must be ≥ 1");
        }

        let grad_order = match self.hp.grad_order.as_str() {
            "first_order" => GradOrder::FirstOrder,
            "exact" => GradOrder::Exact,
            other => return err("hp.grad_order", format!("unknown order `{other}`; expected first_order or exact")),
        };
        let loss_weights: BTreeMap<String, f64> = self.tasks.iter().map(|(id, t)| (id.clone(), t.loss_weight)).collect();
        let hp = HyperParams {
            alpha: self.hp.alpha,
            beta: self.hp.beta,
            gamma: self.hp.gamma,
            inner_steps: self.hp.inner_steps,
            loss_weights,
            variant,
            outer_batch: self.hp.outer_batch,
            seed: self.seed,
            grad_order,
            parallel: self.hp.parallel,
        };
        hp.validate().map_err(|e| ConfigError {
            field: "hp".into(),
            message: e.to_string(),
        })?;

        let mut world = SyntheticWorld::new(self.data.seed.unwrap_or(self.seed), (c, h, w), dense_hw);
        world.classes = self.data.classes;
        world.subtasks = self.data.subtasks;
        world.noise_channel = self.data.noise_channel;

        let model = ModelConfig {
            backbone,
            tasks: sources.iter().map(|s| s.task.clone()).collect(),
            attention,
        };
        model.validate().map_err(|e| ConfigError {
            field: "tasks".into(),
            message: e.to_string(),
        })?;
        Ok(Run {
            config: self.clone(),
            model,
            hp,
            world,
            sources,
        })
    }
}
