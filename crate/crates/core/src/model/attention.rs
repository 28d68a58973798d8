use rand::Rng;

use super::backbone::BackboneConfig;
use super::head::dense_output_extent;
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::nn::{self, init, Conv2dSpec, GaussianParams};
use crate::task::{Labels, TaskKind};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Deterministic,
    Probabilistic,
}

/// Shape of the per-task attention modulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    /// Token width inside the attention blocks.
    pub width: usize,
    /// Number of stacked self-attention blocks.
    pub depth: usize,
}

impl AttentionConfig {
    pub fn new(variant: AttentionVariant) -> Self {
        AttentionConfig {
            variant,
            width: 16,
            depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config("attention width and depth must be ≥ 1".into()));
        }
        Ok(())
    }

    fn core_len(&self) -> usize {
        4 + 6 * self.depth
    }
}

/// Initial bias of the raw scale outputs, giving `σ ≈ 0.0067` at start.
pub const INITIAL_SCALE_BIAS: f64 = -5.0;

const LABEL_ENCODER_BLOCKS: usize = 3;
const LABEL_ENCODER_FILTERS: usize = 4;

fn label_encoder_specs(channels: usize) -> Vec<Conv2dSpec> {
    (0..LABEL_ENCODER_BLOCKS)
        .map(|b| {
            let cin = if b == 0 { channels } else { LABEL_ENCODER_FILTERS };
            Conv2dSpec::new(cin, LABEL_ENCODER_FILTERS, 3, 1, 1)
        })
        .collect()
}

/// Length of the encoded label vector for one sample.
pub fn label_encoding_len(kind: &TaskKind, backbone: &BackboneConfig) -> usize {
    match *kind {
        TaskKind::Classification { ways } => ways,
        TaskKind::VectorRegression { dim } => dim,
        TaskKind::DenseRegression { .. } => {
            let (mut h, mut w) = dense_output_extent(backbone);
            for _ in 0..LABEL_ENCODER_BLOCKS {
                h /= 2;
                w /= 2;
            }
            LABEL_ENCODER_FILTERS * h * w
        }
    }
}

/// Token length: per-channel average of the embedding plus encoded label.
pub fn token_len(kind: &TaskKind, backbone: &BackboneConfig) -> usize {
    backbone.channels + label_encoding_len(kind, backbone)
}

pub fn output_len(cfg: &AttentionConfig, backbone: &BackboneConfig) -> usize {
    match cfg.variant {
        AttentionVariant::Deterministic => backbone.modulation_len(),
        AttentionVariant::Probabilistic => 2 * backbone.modulation_len(),
    }
}

/// Parameters of one modulator, followed by its label encoder when the task
/// has image-shaped labels.
pub fn init_attention<R: Rng + ?Sized>(
    cfg: &AttentionConfig,
    kind: &TaskKind,
    backbone: &BackboneConfig,
    rng: &mut R,
) -> ParamSet {
    let mut p = ParamSet::new();
    let d = cfg.width;
    let linear = |p: &mut ParamSet, name: String, din: usize, dout: usize, rng: &mut R| {
        let shape = [din, dout];
        p.push(format!("{name}.weight"), init::kaiming_uniform(&shape, din, rng));
        p.push(format!("{name}.bias"), Tensor::zeros(&[dout]));
    };
    linear(&mut p, "in".into(), token_len(kind, backbone), d, rng);
    for l in 0..cfg.depth {
        for proj in ["query", "key", "value"] {
            linear(&mut p, format!("layer{l}.{proj}"), d, d, rng);
        }
    }
    let out = output_len(cfg, backbone);
    p.push("out.weight", Tensor::zeros(&[d, out]));
    let mut bias = vec![0.0; out];
    if cfg.variant == AttentionVariant::Probabilistic {
        bias[backbone.modulation_len()..].fill(INITIAL_SCALE_BIAS);
    }
    p.push("out.bias", Tensor::vector(bias));

    if let TaskKind::DenseRegression { channels } = *kind {
        for (b, spec) in label_encoder_specs(channels).iter().enumerate() {
            let s = spec.weight_shape();
            p.push(format!("label_encoder.block{b}.weight"), init::kaiming_uniform(&s, init::conv_fan_in(&s), rng));
            p.push(format!("label_encoder.block{b}.bias"), Tensor::zeros(&[spec.out_channels]));
        }
    }
    p
}

/// Number of label-encoder scalars inside an attention parameter set.
pub fn label_encoder_count(cfg: &AttentionConfig, params: &ParamSet) -> usize {
    params.tensors()[cfg.core_len()..].iter().map(Tensor::len).sum()
}

/// Turns labels into one flat vector per sample (`N × e`).
///
/// Classes become one-hot rows, vectors pass through and image labels go
/// through the 3-block label encoder.
pub fn encode_labels(g: &mut Graph, kind: &TaskKind, labels: &Labels, encoder: &[Var]) -> Result<Var> {
    labels.check(kind)?;
    match (kind, labels) {
        (TaskKind::Classification { ways }, Labels::Classes(c)) => {
            let mut data = vec![0.0; c.len() * ways];
            for (i, &l) in c.iter().enumerate() {
                data[i * ways + l] = 1.0;
            }
            g.constant(Tensor::new(vec![c.len(), *ways], data)?)
        }
        (TaskKind::VectorRegression { .. }, Labels::Vectors(t)) => g.constant(t.clone()),
        (TaskKind::DenseRegression { channels }, Labels::Dense(t)) => {
            let specs = label_encoder_specs(*channels);
            if encoder.len() != 2 * specs.len() {
                return Err(Error::invalid("encode_labels", "label encoder parameters missing"));
            }
            let mut x = g.constant(t.clone())?;
            for (b, spec) in specs.iter().enumerate() {
                x = nn::conv2d(g, x, spec, encoder[2 * b], Some(encoder[2 * b + 1]))?;
                x = g.relu(x)?;
                x = nn::max_pool2d(g, x, 2, 2)?;
            }
            let s = g.shape(x).to_vec();
            g.reshape(x, &[s[0], s[1] * s[2] * s[3]])
        }
        _ => Err(Error::UnknownTask(kind.name().into())),
    }
}

/// Output of a modulator: a delta `w` or a Gaussian over it.
#[derive(Clone, Copy, Debug)]
pub enum AttentionOutput {
    Deterministic { w: Var },
    Probabilistic(GaussianParams),
}

impl AttentionOutput {
    /// The delta that defines the multiplier: `w`, the mean, or
    /// `mean + σ ⊙ noise` when noise is given.
    pub fn delta(&self, g: &mut Graph, noise: Option<Var>) -> Result<Var> {
        match (self, noise) {
            (AttentionOutput::Deterministic { w }, _) => Ok(*w),
            (AttentionOutput::Probabilistic(d), None) => Ok(d.mu),
            (AttentionOutput::Probabilistic(d), Some(e)) => nn::reparam_sample(g, d, e),
        }
    }

    /// Channel multiplier `m = 1 − delta`.
    pub fn multiplier(&self, g: &mut Graph, noise: Option<Var>) -> Result<Var> {
        let w = self.delta(g, noise)?;
        let neg = g.neg(w)?;
        g.add_scalar(neg, 1.0)
    }
}

/// Runs the modulator on a support set.
///
/// `embedding` is the pre-modulation backbone output (`K × C·h·w`), reduced to
/// one value per channel; `encoded` holds encoded labels (`K × e`). Tokens go
/// through the stacked self-attention blocks, are mean-pooled over the K
/// samples and projected to the output.
pub fn attention_forward(
    g: &mut Graph,
    cfg: &AttentionConfig,
    backbone: &BackboneConfig,
    params: &[Var],
    embedding: Var,
    encoded: Var,
) -> Result<AttentionOutput> {
    if params.len() < cfg.core_len() {
        return Err(Error::invalid("attention", "parameter count mismatch"));
    }
    let es = g.shape(embedding).to_vec();
    let ls = g.shape(encoded).to_vec();
    if es.len() != 2 || es[1] != backbone.embedding_len() || ls.len() != 2 || ls[0] != es[0] {
        return Err(Error::shape("attention", &es, &ls));
    }
    let k = es[0];
    if k == 0 {
        return Err(Error::invalid("attention", "empty support set"));
    }
    let c = backbone.channels;
    let spatial = es[1] / c;
    let grid = g.reshape(embedding, &[k, c, spatial])?;
    let pooled = g.sum_to(grid, &[k, c, 1])?;
    let pooled = g.scale(pooled, 1.0 / spatial as f64)?;
    let pooled = g.reshape(pooled, &[k, c])?;
    let tokens = g.concat(&[pooled, encoded], 1)?;

    let mut h = nn::linear(g, tokens, params[0], params[1])?;
    for l in 0..cfg.depth {
        let p = &params[2 + 6 * l..8 + 6 * l];
        let q = nn::linear(g, h, p[0], p[1])?;
        let key = nn::linear(g, h, p[2], p[3])?;
        let v = nn::linear(g, h, p[4], p[5])?;
        h = nn::scaled_dot_product_attention(g, q, key, v)?;
    }
    let summed = g.sum_to(h, &[1, cfg.width])?;
    let mean = g.scale(summed, 1.0 / k as f64)?;
    let o = 2 + 6 * cfg.depth;
    let raw = nn::linear(g, mean, params[o], params[o + 1])?;
    let n_out = output_len(cfg, backbone);
    let raw = g.reshape(raw, &[n_out])?;
    match cfg.variant {
        AttentionVariant::Deterministic => Ok(AttentionOutput::Deterministic { w: g.tanh(raw)? }),
        AttentionVariant::Probabilistic => {
            let half = backbone.modulation_len();
            let mu = g.narrow(raw, 0, 0, half)?;
            let sigma = g.narrow(raw, 0, half, half)?;
            Ok(AttentionOutput::Probabilistic(GaussianParams::from_raw(g, mu, sigma)?))
        }
    }
}

/// Encodes `labels` with the module's own label encoder, then runs it.
pub fn modulator_forward(
    g: &mut Graph,
    cfg: &AttentionConfig,
    backbone: &BackboneConfig,
    kind: &TaskKind,
    params: &[Var],
    embedding: Var,
    labels: &Labels,
) -> Result<AttentionOutput> {
    let split = cfg.core_len().min(params.len());
    let encoded = encode_labels(g, kind, labels, &params[split..])?;
    attention_forward(g, cfg, backbone, &params[..split], embedding, encoded)
}
