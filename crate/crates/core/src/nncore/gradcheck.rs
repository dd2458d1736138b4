//! Central finite-difference gradient checking, shared by unit tests and the
//! acceptance suite.

use super::graph::{Graph, Tensor, TensorId};

/// Result of one gradient check: the worst relative error over every input
/// coordinate.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Check analytic gradients of `build` against central finite differences.
///
/// `build` receives leaf nodes for each input tensor and must return a scalar
/// loss node. Every coordinate of every input is perturbed by +-step. The
/// relative error denominator is floored at 0.01 so near-zero gradients are
/// compared absolutely at 1e-6 scale.
pub fn finite_diff_check(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Graph, &[TensorId]) -> TensorId,
) -> GradCheck {
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut coords = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data[i];
            work[ti].data[i] = orig + step;
            let up = eval(&work);
            work[ti].data[i] = orig - step;
            let down = eval(&work);
            work[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(0.01);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            coords += 1;
        }
    }
    GradCheck { max_rel_err, coords_checked: coords }
}
