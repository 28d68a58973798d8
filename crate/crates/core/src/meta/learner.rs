use rayon::prelude::*;

use super::episode::{run_episode, EpisodeOutcome, Noise, Settings};
use super::{EpisodeFailure, HyperParams, LossRecord, TaskLoss, Variant};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed;
use crate::task::{AdaptationMode, Episode};
use crate::tensor::{OptimState, StepRule, Tensor};

/// Adam state for every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSet {
    pub backbone: OptimState,
    pub heads: Vec<OptimState>,
    pub attention: Vec<OptimState>,
}

/// Weighted outer gradients of one step, per parameter group. Groups that
/// received no episode are `None`.
#[derive(Clone, Debug)]
pub struct OuterGradients {
    pub backbone: Option<Vec<Tensor>>,
    pub heads: Vec<Option<Vec<Tensor>>>,
    pub attention: Vec<Option<Vec<Tensor>>>,
    pub record: LossRecord,
}

/// Values of the two outer objectives: heads and attention descend the
/// modulated one, the backbone the unmodulated one. They coincide without
/// attention.
#[derive(Clone, Debug)]
pub struct ObjectiveValues {
    pub modulated: f64,
    pub unmodulated: f64,
    pub record: LossRecord,
}

/// Owns the mutable model, its optimizer state and the step counter.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: Model,
    pub hp: HyperParams,
    /// Completed outer steps; seeds the per-step random draws.
    pub iteration: u64,
    pub optim: OptimizerSet,
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: &[Tensor], weight: f64) -> Result<()> {
    match acc {
        None => *acc = Some(grads.iter().map(|g| g.map(|v| weight * v)).collect()),
        Some(sum) => {
            for (s, g) in sum.iter_mut().zip(grads) {
                *s = s.zip_map(g, "accumulate", |a, b| a + weight * b)?;
            }
        }
    }
    Ok(())
}

struct Round {
    outcomes: Vec<EpisodeOutcome>,
    failures: Vec<EpisodeFailure>,
}

impl Learner {
    pub fn new(model: Model, hp: HyperParams) -> Result<Learner> {
        hp.validate()?;
        hp.check_model(&model)?;
        let optim = OptimizerSet {
            backbone: OptimState::new(hp.beta, StepRule::adam())?,
            heads: (0..model.heads.len())
                .map(|_| OptimState::new(hp.beta, StepRule::adam()))
                .collect::<Result<_>>()?,
            attention: (0..model.attention.len())
                .map(|_| OptimState::new(hp.gamma, StepRule::adam()))
                .collect::<Result<_>>()?,
        };
        Ok(Learner {
            model,
            hp,
            iteration: 0,
            optim,
        })
    }

    fn run(&self, episodes: &[Episode], steps: usize, want_grads: bool) -> Result<Round> {
        if episodes.is_empty() {
            return Err(Error::invalid("meta_step", "no episodes"));
        }
        let tasks = episodes
            .iter()
            .map(|e| self.model.config.task_index(&e.task_id))
            .collect::<Result<Vec<_>>>()?;
        let settings = |i: usize| {
            let mut s = Settings::from_hp(&self.hp, Noise::Seeded(seed::derive(&[self.hp.seed, self.iteration, i as u64])));
            s.steps = steps;
            s.want_grads = want_grads;
            s
        };
        let work = |i: usize| run_episode(&self.model, tasks[i], &episodes[i], &settings(i));
        let results: Vec<Result<EpisodeOutcome>> = if self.hp.parallel {
            (0..episodes.len()).into_par_iter().map(work).collect()
        } else {
            (0..episodes.len()).map(work).collect()
        };
        let mut round = Round {
            outcomes: Vec::new(),
            failures: Vec::new(),
        };
        for (ep, r) in episodes.iter().zip(results) {
            match r {
                Ok(o) => round.outcomes.push(o),
                Err(e) if e.is_non_finite() => {
                    log::warn!("dropping episode {} of task `{}`: {e}", ep.subtask_id, ep.task_id);
                    round.failures.push(EpisodeFailure {
                        task_id: ep.task_id.clone(),
                        subtask_id: ep.subtask_id,
                        message: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        if round.outcomes.is_empty() {
            return Err(Error::NonFinite { op: "meta_step" });
        }
        Ok(round)
    }

    /// Per-task means and the weighted loss, plus each outcome's weight
    /// `λ_j / n_j`.
    fn summarize(&self, round: &Round) -> (LossRecord, Vec<f64>) {
        let n_tasks = self.model.config.tasks.len();
        let mut count = vec![0usize; n_tasks];
        let mut train = vec![0.0; n_tasks];
        let mut test = vec![0.0; n_tasks];
        let mut kl = vec![None::<f64>; n_tasks];
        for o in &round.outcomes {
            count[o.task] += 1;
            train[o.task] += o.train_loss;
            test[o.task] += o.test_loss;
            if let Some(k) = o.kl {
                *kl[o.task].get_or_insert(0.0) += k;
            }
        }
        let mut tasks = Vec::new();
        let mut weighted = 0.0;
        for j in 0..n_tasks {
            if count[j] == 0 {
                continue;
            }
            let id = &self.model.config.tasks[j].id;
            let n = count[j] as f64;
            let t = TaskLoss {
                task_id: id.clone(),
                episodes: count[j],
                train_loss: train[j] / n,
                test_loss: test[j] / n,
                kl: kl[j].map(|k| k / n),
            };
            weighted += self.hp.loss_weight(id) * t.test_loss;
            tasks.push(t);
        }
        let weights = round
            .outcomes
            .iter()
            .map(|o| self.hp.loss_weight(&self.model.config.tasks[o.task].id) / count[o.task] as f64)
            .collect();
        let record = LossRecord {
            tasks,
            weighted,
            inner_loops: round.outcomes.iter().filter(|o| o.inner_loop).count(),
            failures: round.failures.clone(),
        };
        (record, weights)
    }

    fn gradients_with_steps(&self, episodes: &[Episode], steps: usize) -> Result<OuterGradients> {
        let round = self.run(episodes, steps, true)?;
        let (record, weights) = self.summarize(&round);
        let mut out = OuterGradients {
            backbone: None,
            heads: vec![None; self.model.heads.len()],
            attention: vec![None; self.model.attention.len()],
            record,
        };
        for (o, &w) in round.outcomes.iter().zip(&weights) {
            let g = o.grads.as_ref().expect("gradients requested");
            accumulate(&mut out.backbone, &g.backbone, w)?;
            accumulate(&mut out.heads[o.task], &g.head, w)?;
            if !g.attention.is_empty() {
                accumulate(&mut out.attention[o.task], &g.attention, w)?;
            }
        }
        Ok(out)
    }

    /// Outer gradients of the weighted multi-task objective without applying
    /// them.
    pub fn outer_gradients(&self, episodes: &[Episode]) -> Result<OuterGradients> {
        self.gradients_with_steps(episodes, self.hp.inner_steps)
    }

    /// `Σ_j λ_j · mean_i` of both objectives, evaluated at the current
    /// parameters and step counter.
    pub fn meta_objective(&self, episodes: &[Episode]) -> Result<ObjectiveValues> {
        let round = self.run(episodes, self.hp.inner_steps, false)?;
        let (record, weights) = self.summarize(&round);
        let mut modulated = 0.0;
        let mut unmodulated = 0.0;
        for (o, w) in round.outcomes.iter().zip(&weights) {
            modulated += w * o.modulated_objective;
            unmodulated += w * o.unmodulated_objective;
        }
        Ok(ObjectiveValues {
            modulated,
            unmodulated,
            record,
        })
    }

    fn apply(&mut self, grads: &OuterGradients) -> Result<()> {
        if let Some(g) = &grads.backbone {
            self.optim.backbone.apply(self.model.backbone.tensors_mut(), g)?;
        }
        for (j, g) in grads.heads.iter().enumerate() {
            if let Some(g) = g {
                self.optim.heads[j].apply(self.model.heads[j].tensors_mut(), g)?;
            }
        }
        for (j, g) in grads.attention.iter().enumerate() {
            if let Some(g) = g {
                self.optim.attention[j].apply(self.model.attention[j].tensors_mut(), g)?;
            }
        }
        Ok(())
    }

    fn step_with(&mut self, episodes: &[Episode], steps: usize) -> Result<LossRecord> {
        let grads = self.gradients_with_steps(episodes, steps)?;
        self.apply(&grads)?;
        self.iteration += 1;
        Ok(grads.record)
    }

    /// One outer step of the configured variant.
    pub fn meta_step(&mut self, episodes: &[Episode]) -> Result<LossRecord> {
        if self.hp.variant == Variant::MamlFull {
            return self.full_maml_step(episodes);
        }
        self.step_with(episodes, self.hp.inner_steps)
    }

    /// Joint supervised step for domain-adaptation tasks: no inner loop.
    pub fn pretrain_step(&mut self, episodes: &[Episode]) -> Result<LossRecord> {
        for e in episodes {
            let j = self.model.config.task_index(&e.task_id)?;
            if self.model.config.tasks[j].mode != AdaptationMode::DomainAdaptation {
                return Err(Error::Config(format!("task `{}` is not a domain-adaptation task", e.task_id)));
            }
        }
        self.step_with(episodes, 0)
    }

    /// Outer step where every parameter adapts in the inner loop.
    pub fn full_maml_step(&mut self, episodes: &[Episode]) -> Result<LossRecord> {
        if self.hp.variant != Variant::MamlFull {
            return Err(Error::Config("full_maml_step needs variant maml_full".into()));
        }
        if let Some(first) = episodes.first() {
            if episodes.iter().any(|e| e.task_id != first.task_id) {
                return Err(Error::Config("maml_full cannot handle multiple high-level tasks".into()));
            }
        }
        self.step_with(episodes, self.hp.inner_steps)
    }
}
