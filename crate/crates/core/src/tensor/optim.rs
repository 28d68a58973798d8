use super::value::Tensor;
use crate::error::{Error, Result};

/// `param − lr·grad`.
pub fn sgd_step(param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    if lr < 0.0 {
        return Err(Error::invalid("sgd_step", format!("negative learning rate {lr}")));
    }
    param.zip_map(grad, "sgd_step", |p, g| p - lr * g)
}

/// Per-parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl StepRule {
    pub fn adam() -> Self {
        StepRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate, step rule and moment buffers for one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub rule: StepRule,
    pub step: u64,
    /// First and second moments, aligned with the parameter list (Adam only).
    pub moments: Vec<(Tensor, Tensor)>,
}

impl OptimState {
    pub fn new(lr: f64, rule: StepRule) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid("optimizer", format!("invalid learning rate {lr}")));
        }
        Ok(OptimState {
            lr,
            rule,
            step: 0,
            moments: Vec::new(),
        })
    }

    /// Applies one update in place. A zero learning rate leaves parameters
    /// bit-identical.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "optimizer",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        match self.rule {
            StepRule::Sgd => {
                if self.lr == 0.0 {
                    return Ok(());
                }
                for (p, g) in params.iter_mut().zip(grads) {
                    *p = sgd_step(p, g, self.lr)?;
                }
            }
            StepRule::Adam { beta1, beta2, eps } => {
                if self.moments.is_empty() {
                    self.moments = params
                        .iter()
                        .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
                        .collect();
                }
                if self.moments.len() != params.len() {
                    return Err(Error::invalid("optimizer", "moment buffers do not match parameters"));
                }
                let t = self.step as f64;
                let c1 = 1.0 - beta1.powf(t);
                let c2 = 1.0 - beta2.powf(t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
                    let gd = g.data();
                    for (mi, gi) in m.data_mut().iter_mut().zip(gd) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    }
                    for (vi, gi) in v.data_mut().iter_mut().zip(gd) {
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    }
                    if self.lr == 0.0 {
                        continue;
                    }
                    let (md, vd) = (m.data(), v.data());
                    for (i, pi) in p.data_mut().iter_mut().enumerate() {
                        let mhat = md[i] / c1;
                        let vhat = vd[i] / c2;
                        *pi -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
