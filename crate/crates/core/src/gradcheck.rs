//! Finite-difference checks of every differentiable primitive and of the
//! full two-level meta-gradient.
//!
//! Each case builds a scalar from random inputs; non-scalar outputs are
//! contracted with a random projection so every output element is checked.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::meta::{GradOrder, HyperParams, Learner, ObjectiveValues, Variant};
use crate::model::{AttentionConfig, BackboneConfig, Model, ModelConfig, ParamSet};
use crate::nn::{self, Conv2dSpec, GaussianParams};
use crate::task::{AdaptationMode, Batch, Episode, Labels, TaskKind, TaskSpec};
use crate::tensor::{check_gradients, relative_error, Graph, Tensor, Var, DEFAULT_FD_EPS};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// One named primitive with an input generator and a scalar-valued builder.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    inputs: Inputs,
    build: Build,
}

/// Worst relative error of one case across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} rel_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.rel_err,
            self.tolerance
        )
    }
}

fn u(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

fn n(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// `sum(out ⊙ proj)` where `proj` is the last input.
fn project(g: &mut Graph, out: Var, v: &[Var]) -> Result<Var> {
    let proj = *v.last().expect("projection input");
    let p = g.mul(out, proj)?;
    g.sum(p)
}

macro_rules! case {
    ($name:expr, |$rng:ident| $inputs:expr, |$g:ident, $v:ident| $build:expr) => {
        Case {
            name: $name,
            inputs: |$rng: &mut ChaCha8Rng| $inputs,
            build: |$g: &mut Graph, $v: &[Var]| -> Result<Var> {
                let out = $build;
                project($g, out, $v)
            },
        }
    };
}

/// All primitive cases, in a fixed order.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        case!("add", |r| vec![n(&[3, 4], r), n(&[3, 4], r), n(&[3, 4], r)], |g, v| g.add(v[0], v[1])?),
        case!("sub", |r| vec![n(&[3, 4], r), n(&[3, 4], r), n(&[3, 4], r)], |g, v| g.sub(v[0], v[1])?),
        case!("mul", |r| vec![n(&[3, 4], r), n(&[3, 4], r), n(&[3, 4], r)], |g, v| g.mul(v[0], v[1])?),
        case!(
            "div",
            |r| vec![n(&[3, 4], r), u(&[3, 4], 0.5, 2.0, r), n(&[3, 4], r)],
            |g, v| g.div(v[0], v[1])?
        ),
        case!(
            "add_broadcast",
            |r| vec![n(&[3, 1], r), n(&[1, 4], r), n(&[3, 4], r)],
            |g, v| g.add_b(v[0], v[1])?
        ),
        case!(
            "sub_broadcast",
            |r| vec![n(&[2, 3, 4], r), n(&[3, 1], r), n(&[2, 3, 4], r)],
            |g, v| g.sub_b(v[0], v[1])?
        ),
        case!(
            "mul_broadcast",
            |r| vec![n(&[2, 3, 4], r), n(&[1, 3, 1], r), n(&[2, 3, 4], r)],
            |g, v| g.mul_b(v[0], v[1])?
        ),
        case!(
            "div_broadcast",
            |r| vec![n(&[3, 4], r), u(&[3, 1], 0.5, 2.0, r), n(&[3, 4], r)],
            |g, v| g.div_b(v[0], v[1])?
        ),
        case!("neg", |r| vec![n(&[5], r), n(&[5], r)], |g, v| g.neg(v[0])?),
        case!("scale", |r| vec![n(&[5], r), n(&[5], r)], |g, v| g.scale(v[0], -1.7)?),
        case!("add_scalar", |r| vec![n(&[5], r), n(&[5], r)], |g, v| g.add_scalar(v[0], 0.3)?),
        case!("exp", |r| vec![n(&[6], r), n(&[6], r)], |g, v| g.exp(v[0])?),
        case!("log", |r| vec![u(&[6], 0.2, 3.0, r), n(&[6], r)], |g, v| g.log(v[0])?),
        case!("tanh", |r| vec![n(&[6], r), n(&[6], r)], |g, v| g.tanh(v[0])?),
        case!("sigmoid", |r| vec![n(&[6], r), n(&[6], r)], |g, v| g.sigmoid(v[0])?),
        case!("softplus", |r| vec![n(&[6], r), n(&[6], r)], |g, v| g.softplus(v[0])?),
        case!("powf", |r| vec![u(&[6], 0.3, 2.0, r), n(&[6], r)], |g, v| g.powf(v[0], -0.5)?),
        case!("relu", |r| vec![n(&[8], r), n(&[8], r)], |g, v| g.relu(v[0])?),
        case!(
            "matmul",
            |r| vec![n(&[3, 4], r), n(&[4, 2], r), n(&[3, 2], r)],
            |g, v| g.matmul(v[0], v[1])?
        ),
        case!("transpose", |r| vec![n(&[3, 4], r), n(&[4, 3], r)], |g, v| g.transpose(v[0])?),
        case!("reshape", |r| vec![n(&[3, 4], r), n(&[2, 6], r)], |g, v| g.reshape(v[0], &[2, 6])?),
        case!(
            "broadcast_to",
            |r| vec![n(&[3, 1], r), n(&[2, 3, 4], r)],
            |g, v| g.broadcast_to(v[0], &[2, 3, 4])?
        ),
        case!("sum_to", |r| vec![n(&[2, 3, 4], r), n(&[1, 3, 1], r)], |g, v| g.sum_to(v[0], &[1, 3, 1])?),
        case!("mean", |r| vec![n(&[3, 4], r), n(&[], r)], |g, v| g.mean(v[0])?),
        case!("narrow", |r| vec![n(&[3, 5], r), n(&[3, 2], r)], |g, v| g.narrow(v[0], 1, 2, 2)?),
        case!("pad", |r| vec![n(&[3, 2], r), n(&[3, 5], r)], |g, v| g.pad(v[0], 1, 1, 5)?),
        case!(
            "concat",
            |r| vec![n(&[2, 3], r), n(&[2, 1], r), n(&[2, 4], r)],
            |g, v| g.concat(&[v[0], v[1]], 1)?
        ),
        case!(
            "conv2d",
            |r| vec![n(&[2, 2, 5, 5], r), n(&[3, 2, 3, 3], r), n(&[3], r), n(&[2, 3, 3, 3], r)],
            |g, v| nn::conv2d(g, v[0], &Conv2dSpec::new(2, 3, 3, 2, 1), v[1], Some(v[2]))?
        ),
        case!(
            "conv_transpose2d",
            |r| vec![n(&[2, 3, 3, 3], r), n(&[3, 2, 2, 2], r), n(&[2], r), n(&[2, 2, 6, 6], r)],
            |g, v| nn::conv_transpose2d(g, v[0], &Conv2dSpec::new(3, 2, 2, 2, 0), v[1], Some(v[2]))?
        ),
        case!(
            "conv_weight_grad",
            |r| vec![n(&[2, 2, 4, 4], r), n(&[2, 3, 4, 4], r), n(&[3, 2, 3, 3], r)],
            |g, v| g.conv_weight_grad(v[0], v[1], 1, 1, (3, 3))?
        ),
        case!(
            "batch_norm",
            |r| vec![n(&[3, 2, 2, 2], r), u(&[2], 0.5, 1.5, r), n(&[2], r), n(&[3, 2, 2, 2], r)],
            |g, v| nn::batch_norm(g, v[0], v[1], v[2], nn::BN_EPS)?
        ),
        case!(
            "max_pool2d",
            |r| vec![n(&[2, 2, 4, 5], r), n(&[2, 2, 2, 2], r)],
            |g, v| nn::max_pool2d(g, v[0], 2, 2)?
        ),
        case!(
            "linear",
            |r| vec![n(&[4, 3], r), n(&[3, 2], r), n(&[2], r), n(&[4, 2], r)],
            |g, v| nn::linear(g, v[0], v[1], v[2])?
        ),
        case!("softmax", |r| vec![n(&[3, 4], r), n(&[3, 4], r)], |g, v| nn::softmax_rows(g, v[0])?),
        case!("log_softmax", |r| vec![n(&[3, 4], r), n(&[3, 4], r)], |g, v| nn::log_softmax_rows(
            g, v[0]
        )?),
        case!(
            "scaled_dot_product_attention",
            |r| vec![n(&[2, 3], r), n(&[4, 3], r), n(&[4, 2], r), n(&[2, 2], r)],
            |g, v| nn::scaled_dot_product_attention(g, v[0], v[1], v[2])?
        ),
        case!(
            "cross_entropy",
            |r| vec![n(&[4, 3], r), n(&[], r)],
            |g, v| nn::cross_entropy(g, v[0], &[2, 0, 1, 2])?
        ),
        case!("mse", |r| vec![n(&[3, 2], r), n(&[3, 2], r), n(&[], r)], |g, v| nn::mse(g, v[0], v[1])?),
        case!(
            "channel_modulate",
            |r| vec![n(&[2, 3, 2, 2], r), u(&[3], 0.0, 2.0, r), n(&[2, 3, 2, 2], r)],
            |g, v| nn::channel_modulate(g, v[0], v[1])?
        ),
        case!(
            "kl_diag_gaussian",
            |r| vec![n(&[4], r), n(&[4], r), n(&[4], r), n(&[4], r), n(&[], r)],
            |g, v| {
                let q = GaussianParams::from_raw(g, v[0], v[1])?;
                let p = GaussianParams::from_raw(g, v[2], v[3])?;
                nn::kl_diag_gaussian(g, &q, &p)?
            }
        ),
        case!(
            "reparam_sample",
            |r| vec![n(&[4], r), u(&[4], 0.2, 2.0, r), n(&[4], r), n(&[4], r)],
            |g, v| {
                let d = GaussianParams::new(g, v[0], v[1])?;
                nn::reparam_sample(g, &d, v[2])?
            }
        ),
        case!(
            "second_order",
            |r| vec![n(&[5], r), n(&[5], r), n(&[5], r)],
            |g, v| {
                let t = g.tanh(v[0])?;
                let tx = g.mul(t, v[0])?;
                let y = g.mul(tx, v[1])?;
                let s = g.sum(y)?;
                g.grad(s, &[v[0]], true)?[0]
            }
        ),
    ]
}

impl Case {
    /// Worst relative error over `seeds`, comparing backward with central
    /// differences for every input.
    pub fn check(&self, seeds: &[u64]) -> Result<CheckOutcome> {
        let mut worst: f64 = 0.0;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (self.inputs)(&mut rng);
            let errs = check_gradients(&inputs, self.build, DEFAULT_FD_EPS)?;
            worst = errs.into_iter().fold(worst, f64::max);
        }
        Ok(CheckOutcome {
            name: self.name.to_string(),
            rel_err: worst,
            tolerance: PRIMITIVE_TOLERANCE,
        })
    }
}

/// Runs every primitive case over `seeds`.
pub fn run_primitive_checks(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    primitive_cases().iter().map(|c| c.check(seeds)).collect()
}

/// Tiny two-level fixture: one conv block with two channels on 4×4 inputs,
/// a 2-way head, and for the attention variants a narrow one-layer module
/// with randomized output weights so the multiplier is not the identity.
pub fn composite_fixture(variant: Variant, seed: u64) -> Result<(Learner, Episode)> {
    let backbone = BackboneConfig::new(1, 2, (1, 4, 4));
    let task = TaskSpec::new("cls", TaskKind::Classification { ways: 2 }, AdaptationMode::TaskAdaptation);
    let attention = variant.attention().map(|v| AttentionConfig { variant: v, width: 4, depth: 1 });
    let mut model = Model::new(ModelConfig { backbone, tasks: vec![task], attention }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for set in &mut model.attention {
        let names = set.names().to_vec();
        for (name, t) in names.iter().zip(set.tensors_mut()) {
            if name.starts_with("out.") {
                *t = Tensor::uniform(t.shape(), -0.5, 0.5, &mut rng);
            }
        }
    }
    let hp = HyperParams {
        alpha: 0.1,
        inner_steps: 2,
        variant,
        grad_order: GradOrder::Exact,
        seed,
        ..HyperParams::default()
    };
    let batch = |rng: &mut ChaCha8Rng| Batch::new(Tensor::uniform(&[4, 1, 4, 4], 0.0, 1.0, rng), Labels::Classes(vec![0, 1, 0, 1]));
    let episode = Episode {
        task_id: "cls".into(),
        subtask_id: 0,
        support: batch(&mut rng)?,
        query: batch(&mut rng)?,
    };
    Ok((Learner::new(model, hp)?, episode))
}

#[derive(Clone, Copy)]
enum Group {
    Backbone,
    Head,
    Attention,
}

fn group_mut(model: &mut Model, group: Group) -> &mut ParamSet {
    match group {
        Group::Backbone => &mut model.backbone,
        Group::Head => &mut model.heads[0],
        Group::Attention => &mut model.attention[0],
    }
}

/// Central differences of the objective that trains `group`.
fn numeric_group(learner: &mut Learner, episode: &Episode, group: Group) -> Result<Vec<Tensor>> {
    let pick = |v: &ObjectiveValues| match group {
        Group::Backbone => v.unmodulated,
        _ => v.modulated,
    };
    let shapes: Vec<Vec<usize>> = group_mut(&mut learner.model, group).tensors().iter().map(|t| t.shape().to_vec()).collect();
    let mut out = Vec::new();
    for (k, shape) in shapes.iter().enumerate() {
        let mut grad = Vec::new();
        for i in 0..shape.iter().product::<usize>() {
            let orig = group_mut(&mut learner.model, group).tensors()[k].data()[i];
            let eval = |x: f64, learner: &mut Learner| -> Result<f64> {
                group_mut(&mut learner.model, group).tensors_mut()[k].data_mut()[i] = x;
                Ok(pick(&learner.meta_objective(std::slice::from_ref(episode))?))
            };
            let up = eval(orig + DEFAULT_FD_EPS, learner)?;
            let down = eval(orig - DEFAULT_FD_EPS, learner)?;
            eval(orig, learner)?;
            grad.push((up - down) / (2.0 * DEFAULT_FD_EPS));
        }
        out.push(Tensor::new(shape.clone(), grad)?);
    }
    Ok(out)
}

fn flat(ts: &[Tensor]) -> Tensor {
    Tensor::vector(ts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Exact-mode outer gradients against central differences of the two outer
/// objectives, for backbone, head and attention separately. Reports the
/// worst norm-wise relative error per group over `seeds`.
pub fn run_composite_checks(variant: Variant, seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let groups: &[(Group, &str)] = if variant.attention().is_some() {
        &[(Group::Backbone, "backbone"), (Group::Head, "head"), (Group::Attention, "attention")]
    } else {
        &[(Group::Backbone, "backbone"), (Group::Head, "head")]
    };
    let mut worst = vec![0.0f64; groups.len()];
    for &seed in seeds {
        let (mut learner, episode) = composite_fixture(variant, seed)?;
        let analytic = learner.outer_gradients(std::slice::from_ref(&episode))?;
        for (slot, (group, _)) in groups.iter().enumerate() {
            let a = match group {
                Group::Backbone => analytic.backbone.clone(),
                Group::Head => analytic.heads[0].clone(),
                Group::Attention => analytic.attention[0].clone(),
            }
            .expect("every group receives gradient");
            let numeric = numeric_group(&mut learner, &episode, *group)?;
            worst[slot] = worst[slot].max(relative_error(&flat(&a), &flat(&numeric))?);
        }
    }
    Ok(groups
        .iter()
        .zip(worst)
        .map(|((_, name), rel_err)| CheckOutcome {
            name: format!("meta_objective.{}.{name}", variant.name()),
            rel_err,
            tolerance: COMPOSITE_TOLERANCE,
        })
        .collect())
}
