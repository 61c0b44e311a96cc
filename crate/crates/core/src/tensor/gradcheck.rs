//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates graphs forward, so it is
//! independent of the backward implementation it checks.

use crate::error::Result;
use crate::tensor::{Graph, NodeId, Tensor};

/// Step used for central differences; chosen for 64-bit headroom.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric gradient entry. Near
/// zero the denominator is floored so finite-difference noise does not
/// register as error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Build the graph once, backpropagate, and compare every input gradient
/// against central finite differences. Returns the maximum relative error
/// over all entries of all inputs.
///
/// `build` must construct the loss as a scalar node from the given leaves.
pub fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids).expect("gradcheck graph construction failed");
        g.value(loss).item()
    };

    // Analytic side.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids).expect("gradcheck graph construction failed");
    let grads = g.backward(loss).expect("gradcheck backward failed");

    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[pi])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[pi] = perturb(input, ei, FD_STEP);
            minus[pi] = perturb(input, ei, -FD_STEP);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[ei], numeric));
        }
    }
    worst
}

fn perturb(t: &Tensor, index: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[index] += delta;
    Tensor::new(t.shape().to_vec(), data).expect("perturb preserves shape")
}
