//! Architectures: shared convolutional backbone, per-task heads and per-task
//! attention modulators.

mod attention;
mod backbone;
mod head;
mod params;

pub use attention::{
    attention_forward, encode_labels, init_attention, label_encoder_count, label_encoding_len, modulator_forward,
    output_len, token_len, AttentionConfig, AttentionOutput, AttentionVariant, INITIAL_SCALE_BIAS,
};
pub use backbone::{backbone_forward, BackboneConfig, BackboneOutput, Modulation, BLOCK_PARAMS};
pub use head::{dense_output_extent, head_forward, init_head, UPSAMPLE_BLOCKS};
pub use params::ParamSet;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::task::TaskSpec;
use crate::tensor::Tensor;

/// Backbone, tasks and optional attention shape of a full model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tasks: Vec<TaskSpec>,
    pub attention: Option<AttentionConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Config(format!("duplicate task id `{}`", t.id)));
            }
            if matches!(t.kind, crate::task::TaskKind::DenseRegression { .. }) {
                let (h, w) = dense_output_extent(&self.backbone);
                if h < 8 || w < 8 {
                    return Err(Error::Config(format!(
                        "task `{}`: dense output {h}×{w} is too small for the label encoder",
                        t.id
                    )));
                }
            }
        }
        if let Some(a) = &self.attention {
            a.validate()?;
        }
        Ok(())
    }

    pub fn task_index(&self, id: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }
}

/// Parameter values of a model. `attention` is empty when the model has no
/// modulators; otherwise it holds one set per task, in task order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: ParamSet,
    pub heads: Vec<ParamSet>,
    pub attention: Vec<ParamSet>,
}

/// Exact scalar counts per component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub backbone: usize,
    pub heads: Vec<(String, usize)>,
    /// Whole modulator per task, label encoder included.
    pub attention: Vec<(String, usize)>,
    pub label_encoders: Vec<(String, usize)>,
}

impl ParamCounts {
    pub fn without_attention(&self) -> usize {
        self.backbone + self.heads.iter().map(|h| h.1).sum::<usize>()
    }

    pub fn with_attention(&self) -> usize {
        self.without_attention() + self.attention.iter().map(|a| a.1).sum::<usize>()
    }

    pub fn ratio(&self) -> f64 {
        self.with_attention() as f64 / self.without_attention() as f64
    }
}

impl Model {
    /// Seeded initialization. Backbone and heads are drawn before any
    /// attention parameters, so models that differ only in attention share
    /// their backbone and heads.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = config.backbone.init(&mut rng);
        let heads = config
            .tasks
            .iter()
            .map(|t| init_head(&t.head, &config.backbone, &mut rng))
            .collect();
        let attention = match &config.attention {
            Some(a) => config
                .tasks
                .iter()
                .map(|t| init_attention(a, &t.kind, &config.backbone, &mut rng))
                .collect(),
            None => Vec::new(),
        };
        Ok(Model {
            config,
            backbone,
            heads,
            attention,
        })
    }

    pub fn has_attention(&self) -> bool {
        self.config.attention.is_some()
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let ids = self.config.tasks.iter().map(|t| t.id.clone());
        ParamCounts {
            backbone: self.backbone.count(),
            heads: ids.clone().zip(self.heads.iter().map(ParamSet::count)).collect(),
            attention: ids.clone().zip(self.attention.iter().map(ParamSet::count)).collect(),
            label_encoders: match &self.config.attention {
                Some(cfg) => ids.zip(self.attention.iter().map(|p| label_encoder_count(cfg, p))).collect(),
                None => Vec::new(),
            },
        }
    }

    fn groups(&self) -> Vec<(String, &ParamSet)> {
        let mut out = vec![("backbone".to_string(), &self.backbone)];
        for (t, p) in self.config.tasks.iter().zip(&self.heads) {
            out.push((format!("head.{}", t.id), p));
        }
        for (t, p) in self.config.tasks.iter().zip(&self.attention) {
            out.push((format!("attention.{}", t.id), p));
        }
        out
    }

    /// Every tensor with a fully qualified name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.groups()
            .into_iter()
            .flat_map(|(prefix, p)| {
                p.names()
                    .iter()
                    .zip(p.tensors())
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t.clone()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Replaces every tensor from a named table. The table must name exactly
    /// this model's tensors with matching shapes.
    pub fn load_named(&mut self, table: &[(String, Tensor)]) -> Result<()> {
        let expected: Vec<(String, Tensor)> = self.named_tensors();
        let want: BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        let have: BTreeSet<&str> = table.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<&str> = want.difference(&have).copied().collect();
        let extra: Vec<&str> = have.difference(&want).copied().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Config(format!(
                "architecture mismatch; missing tensors: [{}]; extra tensors: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        let lookup = |name: &str| table.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()).unwrap();
        let mut sets: Vec<&mut ParamSet> = Vec::new();
        sets.push(&mut self.backbone);
        sets.extend(self.heads.iter_mut());
        sets.extend(self.attention.iter_mut());
        let mut names = expected.into_iter().map(|(n, _)| n);
        for set in sets {
            let values = (0..set.len()).map(|_| lookup(&names.next().unwrap())).collect();
            set.set_tensors(values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{AdaptationMode, TaskKind};

    fn classification(attention: Option<AttentionConfig>) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::new(4, 32, (3, 84, 84)),
            tasks: vec![TaskSpec::new(
                "scene",
                TaskKind::Classification { ways: 5 },
                AdaptationMode::TaskAdaptation,
            )],
            attention,
        }
    }

    #[test]
    fn ratio_is_one_without_attention() {
        let m = Model::new(classification(None), 0).unwrap();
        let c = m.count_parameters();
        assert_eq!(c.ratio(), 1.0);
        assert_eq!(c.backbone, 896 + 3 * 9248 + 4 * 64);
        assert_eq!(c.heads[0].1, 800 * 5 + 5);
    }

    #[test]
    fn attention_count_is_exact() {
        let cfg = AttentionConfig::new(AttentionVariant::Deterministic);
        let m = Model::new(classification(Some(cfg)), 0).unwrap();
        let c = m.count_parameters();
        let d = 16;
        let expected = (32 + 5) * d + d + 2 * 3 * (d * d + d) + d * 128 + 128;
        assert_eq!(c.attention[0].1, expected);
        assert!(c.ratio() > 1.01 && c.ratio() < 1.2, "{}", c.ratio());
    }

    #[test]
    fn attention_does_not_shift_backbone_init() {
        let a = Model::new(classification(None), 7).unwrap();
        let cfg = AttentionConfig::new(AttentionVariant::Deterministic);
        let b = Model::new(classification(Some(cfg)), 7).unwrap();
        assert!(a.backbone.bit_eq(&b.backbone));
        assert!(a.heads[0].bit_eq(&b.heads[0]));
    }

    #[test]
    fn named_round_trip_and_mismatch() {
        let cfg = AttentionConfig::new(AttentionVariant::Probabilistic);
        let src = Model::new(classification(Some(cfg)), 1).unwrap();
        let mut dst = Model::new(classification(Some(cfg)), 2).unwrap();
        dst.load_named(&src.named_tensors()).unwrap();
        assert_eq!(src, dst);

        let mut plain = Model::new(classification(None), 2).unwrap();
        let err = plain.load_named(&src.named_tensors()).unwrap_err().to_string();
        assert!(err.contains("extra tensors: [attention.scene."), "{err}");
    }

    #[test]
    fn duplicate_tasks_rejected() {
        let mut cfg = classification(None);
        cfg.tasks.push(cfg.tasks[0].clone());
        assert!(Model::new(cfg, 0).is_err());
    }
}
