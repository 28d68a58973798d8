//! Are the attention module's channel weights pointing the right way?
//!
//! The head is adapted as in evaluation, then a free delta vector (starting
//! at the identity multiplier) is fit by plain gradient descent on every
//! sample of the episode while everything else stays frozen. The fitted
//! multipliers are compared with the ones the attention module predicts.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use mmtl_core::meta::{inner_adapt, task_loss, GradOrder, HyperParams};
use mmtl_core::model::{backbone_forward, head_forward, modulator_forward, Model, Modulation};
use mmtl_core::task::{AdaptationMode, Batch, Episode};
use mmtl_core::{Error, Graph, Result, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub task_id: String,
    pub subtask_id: usize,
    pub steps: usize,
    pub lr: f64,
    pub blocks: usize,
    pub channels: usize,
    /// Multipliers the attention module predicts from the support set.
    pub predicted: Vec<f64>,
    /// Multipliers fit directly on support and query data.
    pub optimized: Vec<f64>,
    /// Fraction of channels whose predicted and fitted deviations from 1
    /// have the same sign (zero counts as its own sign).
    pub agreement: f64,
    /// Full-data loss under identity, predicted and fitted multipliers.
    pub loss_identity: f64,
    pub loss_predicted: f64,
    pub loss_optimized: f64,
    /// Block-0 channels wired to the noise input, if any were planted.
    pub noise_fed: Vec<usize>,
}

impl AttentionReport {
    fn block(&self, v: &[f64], b: usize) -> Vec<f64> {
        v[b * self.channels..(b + 1) * self.channels].to_vec()
    }

    /// Mean fitted multiplier of each block.
    pub fn block_means(&self) -> Vec<f64> {
        (0..self.blocks)
            .map(|b| {
                let v = self.block(&self.optimized, b);
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }

    pub fn noise_fed_mean(&self) -> Option<f64> {
        if self.noise_fed.is_empty() {
            return None;
        }
        Some(self.noise_fed.iter().map(|c| self.optimized[*c]).sum::<f64>() / self.noise_fed.len() as f64)
    }

    /// Tab-separated per-channel table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("block\tchannel\tpredicted\toptimized\tnoise_fed\n");
        for b in 0..self.blocks {
            for c in 0..self.channels {
                let i = b * self.channels + c;
                let noisy = b == 0 && self.noise_fed.contains(&c);
                let _ = writeln!(s, "{b}\t{c}\t{:.9}\t{:.9}\t{}", self.predicted[i], self.optimized[i], noisy as u8);
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task {} subtask {}: {} steps at lr {}", self.task_id, self.subtask_id, self.steps, self.lr);
        let _ = writeln!(
            s,
            "full-data loss: identity {:.6}, predicted {:.6}, optimized {:.6}",
            self.loss_identity, self.loss_predicted, self.loss_optimized
        );
        let _ = writeln!(s, "direction agreement: {:.4}", self.agreement);
        for (b, m) in self.block_means().iter().enumerate() {
            let _ = writeln!(s, "block {b} mean optimized multiplier: {m:.6}");
        }
        if let Some(m) = self.noise_fed_mean() {
            let _ = writeln!(s, "noise-fed channels {:?} mean optimized multiplier: {m:.6}", self.noise_fed);
        }
        s
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

pub fn direction_agreement(predicted: &[f64], optimized: &[f64]) -> f64 {
    let same = predicted
        .iter()
        .zip(optimized)
        .filter(|(p, o)| sign(*p - 1.0) == sign(*o - 1.0))
        .count();
    same as f64 / predicted.len().max(1) as f64
}

fn checksum(tensors: &[&Tensor]) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Rewires block-0 filters so the first `k` channels read only input
/// `noise_channel` and the others never read it. Filter norms are kept.
/// Returns the rewired channel indices.
pub fn plant_noise(model: &mut Model, noise_channel: usize, k: usize) -> Result<Vec<usize>> {
    let cfg = model.config.backbone;
    let cin = cfg.input.0;
    if noise_channel >= cin || k == 0 || k >= cfg.channels {
        return Err(Error::Config(format!(
            "cannot plant noise on input {noise_channel} into {k} of {} channels ({cin} inputs)",
            cfg.channels
        )));
    }
    if cin < 2 {
        return Err(Error::Config("planting noise needs at least two input channels".into()));
    }
    let idx = model
        .backbone
        .names()
        .iter()
        .position(|n| n == "block0.conv.weight")
        .ok_or_else(|| Error::Config("backbone has no block0.conv.weight".into()))?;
    let weight = &mut model.backbone.tensors_mut()[idx];
    let per_in = 9;
    let per_out = cin * per_in;
    let data = weight.data_mut();
    for o in 0..cfg.channels {
        let filter = &mut data[o * per_out..(o + 1) * per_out];
        let norm = filter.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..cin {
            let keep = if o < k { i == noise_channel } else { i != noise_channel };
            if !keep {
                filter[i * per_in..(i + 1) * per_in].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let left = filter.iter().map(|v| v * v).sum::<f64>().sqrt();
        if left > 0.0 {
            filter.iter_mut().for_each(|v| *v *= norm / left);
        }
    }
    Ok((0..k).collect())
}

fn full_data_loss(model: &Model, task: usize, theta: &[Tensor], data: &Batch, multiplier: &Tensor, with_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let spec = &model.config.tasks[task];
    let bcfg = &model.config.backbone;
    let mut g = Graph::new();
    let phi = model.backbone.bind(&mut g, false)?;
    let theta: Vec<Var> = theta.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
    let m = if with_grad {
        g.param(multiplier.clone())?
    } else {
        g.constant(multiplier.clone())?
    };
    let x = g.constant(data.inputs.clone())?;
    let emb = backbone_forward(&mut g, bcfg, &phi, x, Modulation::Multiplier(m))?.embedding;
    let pred = head_forward(&mut g, &spec.head, bcfg, &theta, emb)?;
    let loss = task_loss(&mut g, spec, pred, &data.labels)?;
    let value = g.value(loss).item()?;
    if !with_grad {
        return Ok((value, None));
    }
    let grad = g.backward(loss)?.get(m);
    Ok((value, Some(grad)))
}

/// Runs the experiment on one episode of `model`. The model is only read.
pub fn attention_optimality(model: &Model, hp: &HyperParams, episode: &Episode, steps: usize, lr: f64) -> Result<AttentionReport> {
    let task = model.config.task_index(&episode.task_id)?;
    let (Some(cfg), Some(psi_set)) = (model.config.attention, model.attention.get(task)) else {
        return Err(Error::Config("the checkpoint's variant has no attention modules".into()));
    };
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("invalid learning rate {lr}")));
    }
    let spec = &model.config.tasks[task];
    let bcfg = &model.config.backbone;

    // Predicted multipliers and the adapted head, as in evaluation.
    let mut g = Graph::new();
    let phi = model.backbone.bind(&mut g, false)?;
    let theta = model.heads[task].bind(&mut g, true)?;
    let psi = psi_set.bind(&mut g, false)?;
    let xs = g.constant(episode.support.inputs.clone())?;
    let plain = backbone_forward(&mut g, bcfg, &phi, xs, Modulation::Identity)?.embedding;
    let out = modulator_forward(&mut g, &cfg, bcfg, &spec.kind, &psi, plain, &episode.support.labels)?;
    let m = out.multiplier(&mut g, None)?;
    let predicted = g.value(m).clone();
    let emb_s = backbone_forward(&mut g, bcfg, &phi, xs, Modulation::Multiplier(m))?.embedding;
    let adapt = spec.mode == AdaptationMode::TaskAdaptation && hp.inner_steps > 0;
    let adapted = if adapt {
        inner_adapt(&mut g, spec, bcfg, &theta, emb_s, &episode.support.labels, hp.alpha, hp.inner_steps, GradOrder::FirstOrder)?
            .params
    } else {
        theta
    };
    let theta_prime: Vec<Tensor> = adapted.iter().map(|v| g.value(*v).clone()).collect();
    drop(g);

    let frozen = |theta_prime: &[Tensor]| {
        let mut all: Vec<&Tensor> = model.backbone.tensors().iter().collect();
        all.extend(theta_prime);
        all.extend(psi_set.tensors());
        checksum(&all)
    };
    let before = frozen(&theta_prime);

    let data = episode.support.concat(&episode.query)?;
    let n = bcfg.modulation_len();
    let identity = Tensor::ones(&[n]);
    let (loss_identity, _) = full_data_loss(model, task, &theta_prime, &data, &identity, false)?;
    let (loss_predicted, _) = full_data_loss(model, task, &theta_prime, &data, &predicted, false)?;

    // Fit the delta w of m = 1 − w; descending on w is descending on −m.
    let mut delta = Tensor::zeros(&[n]);
    for _ in 0..steps {
        let multiplier = delta.map(|w| 1.0 - w);
        let (_, grad) = full_data_loss(model, task, &theta_prime, &data, &multiplier, true)?;
        let grad_m = grad.expect("gradient requested");
        if !grad_m.is_finite() {
            return Err(Error::NonFinite { op: "attention fit" });
        }
        delta = delta.zip_map(&grad_m, "attention fit", |w, gm| w + lr * gm)?;
    }
    let optimized = delta.map(|w| 1.0 - w);
    let (loss_optimized, _) = full_data_loss(model, task, &theta_prime, &data, &optimized, false)?;

    if frozen(&theta_prime) != before {
        return Err(Error::Config("frozen parameters changed during the attention fit".into()));
    }
    let predicted = predicted.into_vec();
    let optimized = optimized.into_vec();
    Ok(AttentionReport {
        task_id: episode.task_id.clone(),
        subtask_id: episode.subtask_id,
        steps,
        lr,
        blocks: bcfg.blocks,
        channels: bcfg.channels,
        agreement: direction_agreement(&predicted, &optimized),
        predicted,
        optimized,
        loss_identity,
        loss_predicted,
        loss_optimized,
        noise_fed: Vec::new(),
    })
}
