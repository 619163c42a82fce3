//! Central finite-difference gradient checking.

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences with step `h`. Returns the worst per-input relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)` (Euclidean
/// norms), where `floor` is `1e-6` times the largest analytic gradient norm
/// (at least 1). Tensors whose true gradient is zero (attention key biases)
/// then measure roundoff against the scale of the whole check.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad_or_zeros(*v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let floor = 1e-6 * analytic.iter().map(Tensor::norm).fold(1.0, f64::max);
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = grad
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = grad.norm();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
