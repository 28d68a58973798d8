use super::GradOrder;
use crate::error::Result;
use crate::model::{head_forward, BackboneConfig};
use crate::task::{Labels, TaskSpec};
use crate::tensor::{Graph, Var};

/// Result of an inner loop.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub params: Vec<Var>,
    /// Loss before the first update, if any step ran.
    pub first_loss: Option<f64>,
}

/// `steps` gradient-descent updates of `params` on `loss`.
///
/// With [`GradOrder::FirstOrder`] the gradients enter the graph as constants;
/// with [`GradOrder::Exact`] they stay differentiable.
pub fn inner_loop<F>(
    g: &mut Graph,
    params: &[Var],
    alpha: f64,
    steps: usize,
    order: GradOrder,
    mut loss: F,
) -> Result<Adapted>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut current = params.to_vec();
    let mut first_loss = None;
    for _ in 0..steps {
        let l = loss(g, &current)?;
        if first_loss.is_none() {
            first_loss = Some(g.value(l).item()?);
        }
        if alpha == 0.0 {
            break;
        }
        let grads = g.grad(l, &current, order == GradOrder::Exact)?;
        current = current
            .iter()
            .zip(grads)
            .map(|(&p, gr)| {
                let step = g.scale(gr, alpha)?;
                g.sub(p, step)
            })
            .collect::<Result<_>>()?;
    }
    Ok(Adapted {
        params: current,
        first_loss,
    })
}

/// Adapts only the head parameters `theta` on a support set whose
/// embeddings are already computed; the backbone is never touched.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    g: &mut Graph,
    task: &TaskSpec,
    backbone: &BackboneConfig,
    theta: &[Var],
    support_embedding: Var,
    labels: &Labels,
    alpha: f64,
    steps: usize,
    order: GradOrder,
) -> Result<Adapted> {
    inner_loop(g, theta, alpha, steps, order, |g, p| {
        let pred = head_forward(g, &task.head, backbone, p, support_embedding)?;
        super::task_loss(g, task, pred, labels)
    })
}
