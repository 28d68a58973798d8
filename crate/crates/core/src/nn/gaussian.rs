use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Added to the softplus output so scales stay strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian given by mean and standard deviation vectors.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianParams {
    /// Checks that both vectors share a shape and every scale is positive.
    pub fn new(g: &Graph, mu: Var, sigma: Var) -> Result<Self> {
        if g.shape(mu) != g.shape(sigma) {
            return Err(Error::shape("gaussian", g.shape(mu), g.shape(sigma)));
        }
        if g.value(sigma).data().iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("gaussian", "scale must be strictly positive"));
        }
        Ok(GaussianParams { mu, sigma })
    }

    /// Mean is `tanh(raw_mu)`; scale is `softplus(raw_sigma) + SIGMA_FLOOR`.
    pub fn from_raw(g: &mut Graph, raw_mu: Var, raw_sigma: Var) -> Result<Self> {
        let mu = g.tanh(raw_mu)?;
        let sp = g.softplus(raw_sigma)?;
        let sigma = g.add_scalar(sp, SIGMA_FLOOR)?;
        GaussianParams::new(g, mu, sigma)
    }
}

/// `KL(q ‖ p)` between diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussian(g: &mut Graph, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    if g.shape(q.mu) != g.shape(p.mu) {
        return Err(Error::shape("kl_diag_gaussian", g.shape(q.mu), g.shape(p.mu)));
    }
    let log_ratio = {
        let lp = g.log(p.sigma)?;
        let lq = g.log(q.sigma)?;
        g.sub(lp, lq)?
    };
    let var_q = g.mul(q.sigma, q.sigma)?;
    let diff = g.sub(q.mu, p.mu)?;
    let diff_sq = g.mul(diff, diff)?;
    let num = g.add(var_q, diff_sq)?;
    let var_p = g.mul(p.sigma, p.sigma)?;
    let two_var_p = g.scale(var_p, 2.0)?;
    let frac = g.div(num, two_var_p)?;
    let terms = g.add(log_ratio, frac)?;
    let terms = g.add_scalar(terms, -0.5)?;
    g.sum(terms)
}

/// `mu + sigma ⊙ noise` with externally drawn standard normal `noise`.
pub fn reparam_sample(g: &mut Graph, dist: &GaussianParams, noise: Var) -> Result<Var> {
    if g.shape(noise) != g.shape(dist.mu) {
        return Err(Error::shape("reparam_sample", g.shape(noise), g.shape(dist.mu)));
    }
    let scaled = g.mul(dist.sigma, noise)?;
    g.add(dist.mu, scaled)
}
