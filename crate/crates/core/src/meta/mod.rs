//! Episodic training: head-only inner loop, multi-task outer updates,
//! probabilistic attention training, the full-parameter baseline and
//! evaluation.

mod episode;
mod evaluate;
mod inner;
mod learner;

pub use episode::{elbo_loss, task_loss, ElboParts, Noise, Posterior};
pub use evaluate::{evaluate, time_inner_step, AdaptScope, MetricsRecord};
pub use inner::{inner_adapt, inner_loop, Adapted};
pub use learner::{Learner, ObjectiveValues, OptimizerSet, OuterGradients};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{AttentionVariant, Model};

/// Which computation graph a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Shared backbone and heads, no attention.
    Baseline,
    /// Deterministic attention modulation.
    Am,
    /// Probabilistic attention modulation.
    Pam,
    /// Every parameter adapts in the inner loop; single task only.
    MamlFull,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Am => "am",
            Variant::Pam => "pam",
            Variant::MamlFull => "maml_full",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Ok(match s {
            "baseline" => Variant::Baseline,
            "am" => Variant::Am,
            "pam" => Variant::Pam,
            "maml_full" => Variant::MamlFull,
            _ => return Err(Error::Config(format!("unknown variant `{s}`"))),
        })
    }

    /// Attention flavour the model must carry for this variant.
    pub fn attention(&self) -> Option<AttentionVariant> {
        match self {
            Variant::Am => Some(AttentionVariant::Deterministic),
            Variant::Pam => Some(AttentionVariant::Probabilistic),
            _ => None,
        }
    }
}

/// How the outer gradient treats the inner loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOrder {
    /// Adapted parameters are `θ − α·g` with `g` held constant.
    FirstOrder,
    /// Differentiates through every inner step.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    /// Inner-loop step size.
    pub alpha: f64,
    /// Outer step size for backbone and heads.
    pub beta: f64,
    /// Outer step size for attention modules.
    pub gamma: f64,
    pub inner_steps: usize,
    /// Loss weight per task id; tasks not listed use 1.
    pub loss_weights: BTreeMap<String, f64>,
    pub variant: Variant,
    /// Episodes per task per outer step.
    pub outer_batch: usize,
    pub seed: u64,
    pub grad_order: GradOrder,
    /// Per-episode work on the rayon pool, reduced in episode order.
    pub parallel: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.01,
            beta: 1e-3,
            gamma: 1e-3,
            inner_steps: 5,
            loss_weights: BTreeMap::new(),
            variant: Variant::Baseline,
            outer_batch: 4,
            seed: 0,
            grad_order: GradOrder::FirstOrder,
            parallel: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.outer_batch == 0 {
            return Err(Error::Config("outer_batch must be ≥ 1".into()));
        }
        for (task, w) in &self.loss_weights {
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight of `{task}` must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn loss_weight(&self, task: &str) -> f64 {
        self.loss_weights.get(task).copied().unwrap_or(1.0)
    }

    /// Checks that `model` carries exactly the attention this variant needs.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let have = model.config.attention.map(|a| a.variant);
        if have != self.variant.attention() {
            return Err(Error::Config(format!(
                "variant `{}` needs attention {:?}, model has {:?}",
                self.variant.name(),
                self.variant.attention(),
                have
            )));
        }
        if self.variant == Variant::MamlFull && model.config.tasks.len() != 1 {
            return Err(Error::Config("maml_full handles exactly one task".into()));
        }
        Ok(())
    }
}

/// Losses of one task within an outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLoss {
    pub task_id: String,
    /// Episodes that contributed (failures excluded).
    pub episodes: usize,
    /// Mean support loss before adaptation.
    pub train_loss: f64,
    /// Mean query loss after adaptation.
    pub test_loss: f64,
    /// Mean `KL(q ‖ p)`, probabilistic attention only.
    pub kl: Option<f64>,
}

/// An episode dropped from the outer sum.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeFailure {
    pub task_id: String,
    pub subtask_id: usize,
    pub message: String,
}

/// Summary of one outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub tasks: Vec<TaskLoss>,
    /// `Σ_j λ_j · test_loss_j`.
    pub weighted: f64,
    /// Number of inner loops that ran.
    pub inner_loops: usize,
    pub failures: Vec<EpisodeFailure>,
}
