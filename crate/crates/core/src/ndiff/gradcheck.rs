//! Finite-difference gradient checking.
//!
//! The check rebuilds the graph from scratch for every probe, so any
//! randomness inside the builder (dropout masks, say) must be seeded
//! identically on every call for the comparison to be meaningful.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NdiffError;

/// Step size for central differences. With f64 arithmetic this puts the
/// truncation and round-off errors both well under the 1e-4 acceptance line.
const FD_STEP: f64 = 1e-5;

/// Builds a scalar loss node from parameter nodes that the harness creates.
pub type LossBuilder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NdiffError> + 'a;

/// Compare analytic gradients against central finite differences for every
/// element of every parameter, returning the worst relative error seen.
///
/// The error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`: a
/// relative error with an absolute floor so near-zero gradients are compared
/// absolutely instead of dividing by noise.
pub fn max_rel_error(build: &LossBuilder, params: &[Tensor]) -> Result<f64, NdiffError> {
    let eval = |tensors: &[Tensor]| -> Result<f64, NdiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    // Analytic gradients from one backward sweep.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.take_or_zeros(id, p.rows(), p.cols()))
        .collect();

    let mut worst = 0.0_f64;
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let original = param.data()[ei];
            probe[pi].data_mut()[ei] = original + FD_STEP;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[ei] = original - FD_STEP;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[ei] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[ei];
            let scale = 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}
