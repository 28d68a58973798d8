//! Task descriptions and episodic data containers shared by models, training
//! and data generation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output structure of a high-level task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification { ways: usize },
    DenseRegression { channels: usize },
    VectorRegression { dim: usize },
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Classification { .. } => "classification",
            TaskKind::DenseRegression { .. } => "dense_regression",
            TaskKind::VectorRegression { .. } => "vector_regression",
        }
    }

    pub fn default_loss(&self) -> LossKind {
        match self {
            TaskKind::Classification { .. } => LossKind::CrossEntropy,
            _ => LossKind::Mse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Whether the head is adapted per subtask or trained jointly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptationMode {
    TaskAdaptation,
    DomainAdaptation,
}

/// Output network attached to the shared embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSpec {
    /// Linear map from the flattened embedding to `outputs` values.
    FullyConnected { outputs: usize },
    /// Four upsampling blocks with `filters` channels each, ending in
    /// `out_channels` label channels at 16× the final backbone resolution.
    ConvTranspose { filters: usize, out_channels: usize },
}

/// Everything needed to build, train and score one high-level task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub mode: AdaptationMode,
    pub head: HeadSpec,
    pub loss: LossKind,
}

impl TaskSpec {
    /// Task with the conventional head and loss for its kind.
    pub fn new(id: impl Into<String>, kind: TaskKind, mode: AdaptationMode) -> Self {
        let head = match kind {
            TaskKind::Classification { ways } => HeadSpec::FullyConnected { outputs: ways },
            TaskKind::VectorRegression { dim } => HeadSpec::FullyConnected { outputs: dim },
            TaskKind::DenseRegression { channels } => HeadSpec::ConvTranspose {
                filters: if channels == 1 { 4 } else { 8 },
                out_channels: channels,
            },
        };
        TaskSpec {
            id: id.into(),
            kind,
            mode,
            head,
            loss: kind.default_loss(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task `{}`: {msg}", self.id)));
        if self.id.is_empty() {
            return Err(Error::Config("task id must not be empty".into()));
        }
        match (self.kind, self.head) {
            (TaskKind::Classification { ways }, HeadSpec::FullyConnected { outputs }) if ways == outputs && ways >= 2 => {}
            (TaskKind::VectorRegression { dim }, HeadSpec::FullyConnected { outputs }) if dim == outputs && dim >= 1 => {}
            (TaskKind::DenseRegression { channels }, HeadSpec::ConvTranspose { filters, out_channels })
                if channels == out_channels && channels >= 1 && filters >= 1 => {}
            (kind, head) => return bad(format!("head {head:?} does not fit {kind:?}")),
        }
        match (self.kind, self.loss) {
            (TaskKind::Classification { .. }, LossKind::CrossEntropy) => {}
            (TaskKind::Classification { .. }, _) => return bad("classification needs cross_entropy".into()),
            (_, LossKind::Mse) => {}
            (_, _) => return bad("regression needs mse".into()),
        }
        if matches!(self.kind, TaskKind::Classification { .. }) && self.mode != AdaptationMode::TaskAdaptation {
            return bad("classification must use task adaptation".into());
        }
        Ok(())
    }
}

/// Labels of a batch, one entry per sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// `N × channels × H × W`.
    Dense(Tensor),
    /// `N × dim`.
    Vectors(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Dense(t) | Labels::Vectors(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Result<Labels> {
        Ok(match self {
            Labels::Classes(c) => Labels::Classes(
                rows.iter()
                    .map(|&r| c.get(r).copied().ok_or_else(|| Error::invalid("labels", "row out of range")))
                    .collect::<Result<_>>()?,
            ),
            Labels::Dense(t) => Labels::Dense(t.select_rows(rows)?),
            Labels::Vectors(t) => Labels::Vectors(t.select_rows(rows)?),
        })
    }

    /// Concatenation of two label sets of the same variant.
    pub fn concat(&self, other: &Labels) -> Result<Labels> {
        Ok(match (self, other) {
            (Labels::Classes(a), Labels::Classes(b)) => Labels::Classes(a.iter().chain(b).copied().collect()),
            (Labels::Dense(a), Labels::Dense(b)) => Labels::Dense(Tensor::cat_rows(&[a.clone(), b.clone()])?),
            (Labels::Vectors(a), Labels::Vectors(b)) => Labels::Vectors(Tensor::cat_rows(&[a.clone(), b.clone()])?),
            _ => return Err(Error::invalid("labels", "cannot concatenate different label kinds")),
        })
    }

    /// Checks the labels against the declared task kind.
    pub fn check(&self, kind: &TaskKind) -> Result<()> {
        let ok = match (self, kind) {
            (Labels::Classes(c), TaskKind::Classification { ways }) => c.iter().all(|l| l < ways),
            (Labels::Dense(t), TaskKind::DenseRegression { channels }) => t.rank() == 4 && t.shape()[1] == *channels,
            (Labels::Vectors(t), TaskKind::VectorRegression { dim }) => t.rank() == 2 && t.shape()[1] == *dim,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("labels", format!("labels do not fit task kind {kind:?}")))
        }
    }
}

/// Inputs (`N × C × H × W`) with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Labels,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Labels) -> Result<Self> {
        if inputs.rank() != 4 || inputs.shape()[0] != labels.len() {
            return Err(Error::invalid(
                "batch",
                format!("{} labels for inputs of shape {:?}", labels.len(), inputs.shape()),
            ));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        Batch::new(
            Tensor::cat_rows(&[self.inputs.clone(), other.inputs.clone()])?,
            self.labels.concat(&other.labels)?,
        )
    }
}

/// One subtask: a support set for adaptation and a query set for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task_id: String,
    pub subtask_id: usize,
    pub support: Batch,
    pub query: Batch,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conventional_heads_validate() {
        for kind in [
            TaskKind::Classification { ways: 5 },
            TaskKind::DenseRegression { channels: 1 },
            TaskKind::DenseRegression { channels: 3 },
            TaskKind::VectorRegression { dim: 2 },
        ] {
            let mode = match kind {
                TaskKind::Classification { .. } => AdaptationMode::TaskAdaptation,
                _ => AdaptationMode::DomainAdaptation,
            };
            TaskSpec::new("t", kind, mode).validate().unwrap();
        }
    }

    #[test]
    fn contradictions_rejected() {
        let spec = TaskSpec::new("c", TaskKind::Classification { ways: 5 }, AdaptationMode::DomainAdaptation);
        assert!(spec.validate().is_err());
        let mut spec = TaskSpec::new("v", TaskKind::VectorRegression { dim: 2 }, AdaptationMode::DomainAdaptation);
        spec.loss = LossKind::CrossEntropy;
        assert!(spec.validate().is_err());
        let mut spec = TaskSpec::new("d", TaskKind::DenseRegression { channels: 1 }, AdaptationMode::DomainAdaptation);
        spec.head = HeadSpec::FullyConnected { outputs: 1 };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn label_checks() {
        let kind = TaskKind::Classification { ways: 3 };
        Labels::Classes(vec![0, 2]).check(&kind).unwrap();
        assert!(Labels::Classes(vec![3]).check(&kind).is_err());
        assert!(Labels::Vectors(Tensor::zeros(&[2, 2])).check(&kind).is_err());
    }
}
