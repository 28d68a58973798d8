use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::episode::task_loss;
use super::inner::{inner_adapt, inner_loop};
use super::{GradOrder, HyperParams, Variant};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{backbone_forward, head_forward, modulator_forward, Model, Modulation};
use crate::task::{AdaptationMode, Episode, Labels};
use crate::tensor::{Graph, Tensor, Var};

/// Held-out scores of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub task_id: String,
    /// Episodes scored (failures excluded).
    pub episodes: usize,
    /// Mean query loss.
    pub loss: f64,
    /// Classification accuracy over all query samples.
    pub accuracy: Option<f64>,
    /// 95% half-width of `accuracy`.
    pub ci: Option<f64>,
    /// Mean squared error, regression tasks.
    pub mse: Option<f64>,
    /// Fraction of output elements within the default threshold.
    pub threshold_acc: Option<f64>,
    /// Head-free nearest-support accuracy, classification tasks.
    pub nil: Option<f64>,
    /// Mean wall-clock per episode spent adapting.
    pub adapt_ms: f64,
    /// Mean wall-clock per episode spent predicting the query set.
    pub infer_ms: f64,
    pub failures: usize,
}

impl MetricsRecord {
    /// Same record with wall-clock fields zeroed, for determinism checks.
    pub fn without_timings(&self) -> MetricsRecord {
        MetricsRecord {
            adapt_ms: 0.0,
            infer_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Default)]
struct Score {
    loss: f64,
    correct: usize,
    total: usize,
    nil_correct: Option<usize>,
    mse: f64,
    hits: usize,
    elements: usize,
    adapt: Duration,
    infer: Duration,
}

fn score_predictions(score: &mut Score, pred: &Tensor, labels: &Labels, emb: Option<(&Tensor, &Labels, &Tensor)>) -> Result<()> {
    match labels {
        Labels::Classes(c) => {
            let guess = metrics::argmax_rows(pred)?;
            score.correct = guess.iter().zip(c).filter(|(a, b)| a == b).count();
            score.total = c.len();
            if let Some((se, Labels::Classes(sl), qe)) = emb {
                score.nil_correct = metrics::nil_correct(se, sl, qe, c).ok();
            }
        }
        Labels::Dense(t) | Labels::Vectors(t) => {
            score.mse = pred
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / t.len() as f64;
            let (hits, n) = metrics::threshold_hits(pred, t, metrics::DEFAULT_THRESHOLD)?;
            score.hits = hits;
            score.elements = n;
        }
    }
    Ok(())
}

fn eval_episode(model: &Model, task: usize, ep: &Episode, hp: &HyperParams) -> Result<Score> {
    let spec = &model.config.tasks[task];
    let bcfg = &model.config.backbone;
    let adapt = spec.mode == AdaptationMode::TaskAdaptation && hp.inner_steps > 0;
    let mut score = Score::default();
    let mut g = Graph::new();
    let start = Instant::now();
    let xs = g.constant(ep.support.inputs.clone())?;
    let xq = g.constant(ep.query.inputs.clone())?;

    if hp.variant == Variant::MamlFull {
        let mut params = model.backbone.bind(&mut g, true)?;
        let n_phi = params.len();
        params.extend(model.heads[task].bind(&mut g, true)?);
        let forward = |g: &mut Graph, p: &[Var], x: Var| -> Result<(Var, Var)> {
            let emb = backbone_forward(g, bcfg, &p[..n_phi], x, Modulation::Identity)?.embedding;
            Ok((emb, head_forward(g, &spec.head, bcfg, &p[n_phi..], emb)?))
        };
        let adapted = if adapt {
            inner_loop(&mut g, &params, hp.alpha, hp.inner_steps, GradOrder::FirstOrder, |g, p| {
                let (_, pred) = forward(g, p, xs)?;
                task_loss(g, spec, pred, &ep.support.labels)
            })?
            .params
        } else {
            params
        };
        score.adapt = start.elapsed();
        let t = Instant::now();
        let (emb_s, _) = g.no_grad(|g| forward(g, &adapted, xs))?;
        let (emb_q, pred) = forward(&mut g, &adapted, xq)?;
        let loss = task_loss(&mut g, spec, pred, &ep.query.labels)?;
        score.loss = g.value(loss).item()?;
        score.infer = t.elapsed();
        let emb = (g.value(emb_s), &ep.support.labels, g.value(emb_q));
        score_predictions(&mut score, g.value(pred), &ep.query.labels, Some(emb))?;
        return Ok(score);
    }

    let phi = model.backbone.bind(&mut g, false)?;
    let theta = model.heads[task].bind(&mut g, true)?;
    let plain_s = backbone_forward(&mut g, bcfg, &phi, xs, Modulation::Identity)?.embedding;
    let modulation = match (model.config.attention, model.attention.get(task)) {
        (Some(cfg), Some(p)) => {
            let psi = p.bind(&mut g, false)?;
            let out = modulator_forward(&mut g, &cfg, bcfg, &spec.kind, &psi, plain_s, &ep.support.labels)?;
            Modulation::Multiplier(out.multiplier(&mut g, None)?)
        }
        _ => Modulation::Identity,
    };
    let emb_s = match modulation {
        Modulation::Identity => plain_s,
        m => backbone_forward(&mut g, bcfg, &phi, xs, m)?.embedding,
    };
    let theta_prime = if adapt {
        inner_adapt(&mut g, spec, bcfg, &theta, emb_s, &ep.support.labels, hp.alpha, hp.inner_steps, GradOrder::FirstOrder)?
            .params
    } else {
        theta
    };
    score.adapt = start.elapsed();
    let t = Instant::now();
    let emb_q = backbone_forward(&mut g, bcfg, &phi, xq, modulation)?.embedding;
    let pred = head_forward(&mut g, &spec.head, bcfg, &theta_prime, emb_q)?;
    let loss = task_loss(&mut g, spec, pred, &ep.query.labels)?;
    score.loss = g.value(loss).item()?;
    score.infer = t.elapsed();
    let emb = (g.value(emb_s), &ep.support.labels, g.value(emb_q));
    score_predictions(&mut score, g.value(pred), &ep.query.labels, Some(emb))?;
    Ok(score)
}

/// Scores held-out episodes; one record per task, in model task order.
///
/// Task-adaptation tasks adapt their head on the support set first; the
/// model itself is never modified.
pub fn evaluate(model: &Model, hp: &HyperParams, episodes: &[Episode]) -> Result<Vec<MetricsRecord>> {
    if episodes.is_empty() {
        return Err(Error::invalid("evaluate", "empty suite"));
    }
    hp.check_model(model)?;
    let tasks = episodes
        .iter()
        .map(|e| model.config.task_index(&e.task_id))
        .collect::<Result<Vec<_>>>()?;
    let work = |i: usize| eval_episode(model, tasks[i], &episodes[i], hp);
    let results: Vec<Result<Score>> = if hp.parallel {
        (0..episodes.len()).into_par_iter().map(work).collect()
    } else {
        (0..episodes.len()).map(work).collect()
    };

    let mut records = Vec::new();
    for (j, spec) in model.config.tasks.iter().enumerate() {
        let mut scores = Vec::new();
        let mut failures = 0;
        for (i, r) in results.iter().enumerate() {
            if tasks[i] != j {
                continue;
            }
            match r {
                Ok(s) => scores.push(s),
                Err(e) if e.is_non_finite() => {
                    log::warn!("episode {} of task `{}` diverged: {e}", episodes[i].subtask_id, spec.id);
                    failures += 1;
                }
                Err(e) => return Err(e.clone()),
            }
        }
        if scores.is_empty() && failures == 0 {
            continue;
        }
        let n = scores.len().max(1) as f64;
        let mean = |f: &dyn Fn(&Score) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n;
        let classification = matches!(spec.kind, crate::task::TaskKind::Classification { .. });
        let (accuracy, ci, nil) = if classification && !scores.is_empty() {
            let correct = scores.iter().map(|s| s.correct).sum();
            let total = scores.iter().map(|s| s.total).sum();
            let (p, h) = metrics::accuracy_ci(correct, total)?;
            let nil_scores: Vec<_> = scores.iter().filter(|s| s.nil_correct.is_some()).collect();
            let nil = if nil_scores.is_empty() {
                None
            } else {
                let c: usize = nil_scores.iter().map(|s| s.nil_correct.unwrap()).sum();
                let t: usize = nil_scores.iter().map(|s| s.total).sum();
                Some(c as f64 / t as f64)
            };
            (Some(p), Some(h), nil)
        } else {
            (None, None, None)
        };
        let (mse, threshold_acc) = if !classification && !scores.is_empty() {
            let hits: usize = scores.iter().map(|s| s.hits).sum();
            let elements: usize = scores.iter().map(|s| s.elements).sum();
            (Some(mean(&|s| s.mse)), Some(hits as f64 / elements as f64))
        } else {
            (None, None)
        };
        records.push(MetricsRecord {
            task_id: spec.id.clone(),
            episodes: scores.len(),
            loss: mean(&|s| s.loss),
            accuracy,
            ci,
            mse,
            threshold_acc,
            nil,
            adapt_ms: mean(&|s| s.adapt.as_secs_f64() * 1e3),
            infer_ms: mean(&|s| s.infer.as_secs_f64() * 1e3),
            failures,
        });
    }
    Ok(records)
}

/// Which parameters one timed inner step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptScope {
    /// Backbone forward once, then one head update.
    HeadOnly,
    /// One update of backbone and head together.
    Full,
}

/// Wall-clock of one inner step on the support set of `episode`, including
/// the support forward pass it needs.
pub fn time_inner_step(model: &Model, episode: &Episode, alpha: f64, scope: AdaptScope) -> Result<Duration> {
    let task = model.config.task_index(&episode.task_id)?;
    let spec = &model.config.tasks[task];
    let bcfg = &model.config.backbone;
    let start = Instant::now();
    let mut g = Graph::new();
    let xs = g.constant(episode.support.inputs.clone())?;
    match scope {
        AdaptScope::HeadOnly => {
            let phi = model.backbone.bind(&mut g, false)?;
            let theta = model.heads[task].bind(&mut g, true)?;
            let emb = backbone_forward(&mut g, bcfg, &phi, xs, Modulation::Identity)?.embedding;
            inner_adapt(&mut g, spec, bcfg, &theta, emb, &episode.support.labels, alpha, 1, GradOrder::FirstOrder)?;
        }
        AdaptScope::Full => {
            let mut params = model.backbone.bind(&mut g, true)?;
            let n_phi = params.len();
            params.extend(model.heads[task].bind(&mut g, true)?);
            inner_loop(&mut g, &params, alpha, 1, GradOrder::FirstOrder, |g, p| {
                let emb = backbone_forward(g, bcfg, &p[..n_phi], xs, Modulation::Identity)?.embedding;
                let pred = head_forward(g, &spec.head, bcfg, &p[n_phi..], emb)?;
                task_loss(g, spec, pred, &episode.support.labels)
            })?;
        }
    }
    Ok(start.elapsed())
}
