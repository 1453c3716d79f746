//! Reverse-mode differentiation with second-order support.
//!
//! A loss is described as a closure that records its computation on a
//! [`Graph`] starting from a single leaf. Gradients come from one reverse
//! pass; Hessian-vector products differentiate the recorded gradient a
//! second time (double backprop), which works the same whether the leaf is
//! the parameter vector or a network input.

mod graph;
pub mod kernels;

pub use graph::{Graph, NodeId};

use crate::error::{ensure_dim, Result};
use crate::tensor::Tensor;

/// Records a scalar loss as a function of `leaf`.
pub trait Objective {
    fn record(&self, g: &mut Graph, leaf: NodeId) -> Result<NodeId>;
}

impl<F> Objective for F
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    fn record(&self, g: &mut Graph, leaf: NodeId) -> Result<NodeId> {
        self(g, leaf)
    }
}

fn record_scalar(f: &impl Objective, g: &mut Graph, at: &Tensor) -> Result<(NodeId, NodeId)> {
    let leaf = g.leaf(at.clone());
    let loss = f.record(g, leaf)?;
    ensure_dim!(
        g.value(loss).len() == 1,
        "objective must be scalar, got shape {:?}",
        g.shape(loss)
    );
    g.check_finite()?;
    Ok((leaf, loss))
}

pub fn value(f: &impl Objective, at: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (_, loss) = record_scalar(f, &mut g, at)?;
    Ok(g.value(loss).item())
}

/// Loss value and exact gradient at `at`.
pub fn value_and_grad(f: &impl Objective, at: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let (leaf, loss) = record_scalar(f, &mut g, at)?;
    let grad = g.backward(loss, &[leaf])?[0];
    g.check_finite()?;
    Ok((g.value(loss).item(), g.value(grad).clone()))
}

/// `H v` by differentiating `⟨∇f, v⟩` once more.
pub fn hvp(f: &impl Objective, at: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(hvp_with_grad(f, at, v)?.2)
}

/// Loss, gradient and `H v` from a single recording.
pub fn hvp_with_grad(f: &impl Objective, at: &Tensor, v: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    ensure_dim!(
        at.shape() == v.shape(),
        "direction shape {:?} differs from point shape {:?}",
        v.shape(),
        at.shape()
    );
    let mut g = Graph::new();
    let (leaf, loss) = record_scalar(f, &mut g, at)?;
    let grad = g.backward(loss, &[leaf])?[0];
    let dir = g.constant(v.clone());
    let gv = g.inner(grad, dir)?;
    let hv = g.backward(gv, &[leaf])?[0];
    g.check_finite()?;
    Ok((
        g.value(loss).item(),
        g.value(grad).clone(),
        g.value(hv).clone(),
    ))
}
