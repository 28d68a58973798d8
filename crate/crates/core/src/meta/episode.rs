//! Forward and gradient computation for a single episode.

use super::inner::{inner_adapt, inner_loop};
use super::{GradOrder, HyperParams, Variant};
use crate::error::{Error, Result};
use crate::model::{backbone_forward, head_forward, modulator_forward, AttentionOutput, Model, Modulation};
use crate::nn;
use crate::seed;
use crate::task::{AdaptationMode, Episode, Labels, LossKind, TaskSpec};
use crate::tensor::{Graph, Tensor, Var};

/// Source of the standard-normal draw used by the probabilistic sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    Zero,
    Seeded(u64),
}

impl Noise {
    fn tensor(&self, len: usize) -> Tensor {
        match self {
            Noise::Zero => Tensor::zeros(&[len]),
            Noise::Seeded(s) => Tensor::randn(&[len], &mut seed::rng(&[*s])),
        }
    }
}

/// Where the probabilistic posterior comes from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Posterior {
    /// Query embeddings and labels, the usual training setup.
    FromQuery,
    /// The prior itself, which makes the KL term vanish.
    TiedToPrior,
}

/// Task loss of `pred` against `labels`.
pub fn task_loss(g: &mut Graph, task: &TaskSpec, pred: Var, labels: &Labels) -> Result<Var> {
    match (task.loss, labels) {
        (LossKind::CrossEntropy, Labels::Classes(c)) => nn::cross_entropy(g, pred, c),
        (LossKind::Mse, Labels::Dense(t) | Labels::Vectors(t)) => {
            let target = g.constant(t.clone())?;
            nn::mse(g, pred, target)
        }
        _ => Err(Error::invalid("task_loss", format!("labels do not fit loss of task `{}`", task.id))),
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Settings {
    pub variant: Variant,
    pub alpha: f64,
    pub steps: usize,
    pub order: GradOrder,
    pub noise: Noise,
    pub posterior: Posterior,
    /// Training uses sampled posterior multipliers; otherwise the prior mean.
    pub training: bool,
    pub want_grads: bool,
}

impl Settings {
    pub fn from_hp(hp: &HyperParams, noise: Noise) -> Self {
        Settings {
            variant: hp.variant,
            alpha: hp.alpha,
            steps: hp.inner_steps,
            order: hp.grad_order,
            noise,
            posterior: Posterior::FromQuery,
            training: true,
            want_grads: true,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EpisodeGrads {
    pub backbone: Vec<Tensor>,
    pub head: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub(crate) struct EpisodeOutcome {
    pub task: usize,
    pub train_loss: f64,
    /// Query task loss along the prediction path.
    pub test_loss: f64,
    pub kl: Option<f64>,
    /// Objective whose gradient trains heads and attention.
    pub modulated_objective: f64,
    /// Objective whose gradient trains the backbone.
    pub unmodulated_objective: f64,
    pub inner_loop: bool,
    pub grads: Option<EpisodeGrads>,
}

fn support_loss_value(g: &mut Graph, task: &TaskSpec, model: &Model, theta: &[Var], emb: Var, labels: &Labels) -> Result<f64> {
    g.no_grad(|g| {
        let pred = head_forward(g, &task.head, &model.config.backbone, theta, emb)?;
        let l = task_loss(g, task, pred, labels)?;
        g.value(l).item()
    })
}

fn grads_to_tensors(g: &Graph, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| g.value(*v).clone()).collect()
}

/// Runs one episode of the head-adapting variants (baseline, am, pam).
pub(crate) fn run_episode(model: &Model, task: usize, ep: &Episode, s: &Settings) -> Result<EpisodeOutcome> {
    if s.variant == Variant::MamlFull {
        return run_full_episode(model, task, ep, s);
    }
    let spec = &model.config.tasks[task];
    let bcfg = &model.config.backbone;
    ep.support.labels.check(&spec.kind)?;
    ep.query.labels.check(&spec.kind)?;

    let mut g = Graph::new();
    let phi = model.backbone.bind(&mut g, s.want_grads)?;
    let theta = model.heads[task].bind(&mut g, true)?;
    let attention = match (model.config.attention, model.attention.get(task)) {
        (Some(cfg), Some(p)) => Some((cfg, p.bind(&mut g, s.want_grads)?)),
        (None, _) => None,
        (Some(_), None) => return Err(Error::UnknownTask(spec.id.clone())),
    };
    let xs = g.constant(ep.support.inputs.clone())?;
    let xq = g.constant(ep.query.inputs.clone())?;
    let plain_s = backbone_forward(&mut g, bcfg, &phi, xs, Modulation::Identity)?.embedding;
    let plain_q = backbone_forward(&mut g, bcfg, &phi, xq, Modulation::Identity)?.embedding;

    let (emb_s, emb_q, kl) = match &attention {
        None => (plain_s, plain_q, None),
        Some((cfg, psi)) => {
            let prior = modulator_forward(&mut g, cfg, bcfg, &spec.kind, psi, plain_s, &ep.support.labels)?;
            let (m, kl) = match prior {
                AttentionOutput::Deterministic { .. } => (prior.multiplier(&mut g, None)?, None),
                AttentionOutput::Probabilistic(p) if s.training => {
                    let post = match s.posterior {
                        Posterior::FromQuery => {
                            modulator_forward(&mut g, cfg, bcfg, &spec.kind, psi, plain_q, &ep.query.labels)?
                        }
                        Posterior::TiedToPrior => prior,
                    };
                    let AttentionOutput::Probabilistic(q) = post else { unreachable!() };
                    let noise = g.constant(s.noise.tensor(bcfg.modulation_len()))?;
                    let m = post.multiplier(&mut g, Some(noise))?;
                    (m, Some(nn::kl_diag_gaussian(&mut g, &q, &p)?))
                }
                AttentionOutput::Probabilistic(_) => (prior.multiplier(&mut g, None)?, None),
            };
            let ms = backbone_forward(&mut g, bcfg, &phi, xs, Modulation::Multiplier(m))?.embedding;
            let mq = backbone_forward(&mut g, bcfg, &phi, xq, Modulation::Multiplier(m))?.embedding;
            (ms, mq, kl)
        }
    };

    let adapt = spec.mode == AdaptationMode::TaskAdaptation && s.steps > 0;
    let (theta_prime, train_loss) = if adapt {
        let a = inner_adapt(&mut g, spec, bcfg, &theta, emb_s, &ep.support.labels, s.alpha, s.steps, s.order)?;
        (a.params, a.first_loss.expect("at least one inner step"))
    } else {
        let l = support_loss_value(&mut g, spec, model, &theta, emb_s, &ep.support.labels)?;
        (theta.clone(), l)
    };

    let pred = head_forward(&mut g, &spec.head, bcfg, &theta_prime, emb_q)?;
    let query_loss = task_loss(&mut g, spec, pred, &ep.query.labels)?;
    let test_loss = g.value(query_loss).item()?;
    let modulated = match kl {
        Some(k) => g.add(query_loss, k)?,
        None => query_loss,
    };
    let unmodulated = if attention.is_some() {
        let pred = head_forward(&mut g, &spec.head, bcfg, &theta_prime, plain_q)?;
        task_loss(&mut g, spec, pred, &ep.query.labels)?
    } else {
        modulated
    };

    let grads = if !s.want_grads {
        None
    } else if let Some((_, psi)) = &attention {
        let mut wrt = theta.clone();
        wrt.extend(psi);
        let gm = g.grad(modulated, &wrt, false)?;
        let gu = g.grad(unmodulated, &phi, false)?;
        Some(EpisodeGrads {
            backbone: grads_to_tensors(&g, &gu),
            head: grads_to_tensors(&g, &gm[..theta.len()]),
            attention: grads_to_tensors(&g, &gm[theta.len()..]),
        })
    } else {
        let mut wrt = phi.clone();
        wrt.extend(&theta);
        let all = g.grad(modulated, &wrt, false)?;
        Some(EpisodeGrads {
            backbone: grads_to_tensors(&g, &all[..phi.len()]),
            head: grads_to_tensors(&g, &all[phi.len()..]),
            attention: Vec::new(),
        })
    };

    Ok(EpisodeOutcome {
        task,
        train_loss,
        test_loss,
        kl: kl.map(|k| g.value(k).item()).transpose()?,
        modulated_objective: g.value(modulated).item()?,
        unmodulated_objective: g.value(unmodulated).item()?,
        inner_loop: adapt,
        grads,
    })
}

/// Full-parameter adaptation: backbone and head both move in the inner loop.
fn run_full_episode(model: &Model, task: usize, ep: &Episode, s: &Settings) -> Result<EpisodeOutcome> {
    let spec = &model.config.tasks[task];
    let bcfg = &model.config.backbone;
    let mut g = Graph::new();
    let mut params = model.backbone.bind(&mut g, true)?;
    let n_phi = params.len();
    params.extend(model.heads[task].bind(&mut g, true)?);
    let xs = g.constant(ep.support.inputs.clone())?;
    let xq = g.constant(ep.query.inputs.clone())?;

    let forward = |g: &mut Graph, p: &[Var], x: Var| -> Result<Var> {
        let emb = backbone_forward(g, bcfg, &p[..n_phi], x, Modulation::Identity)?.embedding;
        head_forward(g, &spec.head, bcfg, &p[n_phi..], emb)
    };
    let adapt = spec.mode == AdaptationMode::TaskAdaptation && s.steps > 0;
    let (adapted, train_loss) = if adapt {
        let a = inner_loop(&mut g, &params, s.alpha, s.steps, s.order, |g, p| {
            let pred = forward(g, p, xs)?;
            task_loss(g, spec, pred, &ep.support.labels)
        })?;
        (a.params, a.first_loss.expect("at least one inner step"))
    } else {
        let l = g.no_grad(|g| {
            let pred = forward(g, &params, xs)?;
            let l = task_loss(g, spec, pred, &ep.support.labels)?;
            g.value(l).item()
        })?;
        (params.clone(), l)
    };
    let pred = forward(&mut g, &adapted, xq)?;
    let loss = task_loss(&mut g, spec, pred, &ep.query.labels)?;
    let value = g.value(loss).item()?;
    let grads = if s.want_grads {
        let all = g.grad(loss, &params, false)?;
        Some(EpisodeGrads {
            backbone: grads_to_tensors(&g, &all[..n_phi]),
            head: grads_to_tensors(&g, &all[n_phi..]),
            attention: Vec::new(),
        })
    } else {
        None
    };
    Ok(EpisodeOutcome {
        task,
        train_loss,
        test_loss: value,
        kl: None,
        modulated_objective: value,
        unmodulated_objective: value,
        inner_loop: adapt,
        grads,
    })
}

/// Terms of the probabilistic training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboParts {
    pub query_loss: f64,
    pub kl: f64,
    pub total: f64,
}

/// Query loss under a reparameterized posterior sample plus `KL(q ‖ p)`.
pub fn elbo_loss(model: &Model, episode: &Episode, hp: &HyperParams, noise: Noise, posterior: Posterior) -> Result<ElboParts> {
    if hp.variant != Variant::Pam {
        return Err(Error::Config("elbo_loss needs variant pam".into()));
    }
    hp.check_model(model)?;
    let task = model.config.task_index(&episode.task_id)?;
    let mut s = Settings::from_hp(hp, noise);
    s.posterior = posterior;
    s.want_grads = false;
    let out = run_episode(model, task, episode, &s)?;
    let kl = out.kl.expect("probabilistic attention yields a KL term");
    Ok(ElboParts {
        query_loss: out.test_loss,
        kl,
        total: out.modulated_objective,
    })
}
