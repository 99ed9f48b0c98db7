//! Central finite-difference verification of reverse-mode gradients.

use crate::autograd::{backward, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely; a gradient of exactly zero
/// has no meaningful relative error.
pub const REL_FLOOR: f64 = 1e-3;

/// Default pass threshold on [`GradCheck::max_rel_error`].
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub evaluations: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares backward-pass gradients of `loss(inputs)` against central
/// differences for every element of every input.
///
/// `loss` must be a pure function of the leaf values it receives.
pub fn check<F>(inputs: &[Tensor<f64>], mut loss: F) -> Result<GradCheck>
where
    F: FnMut(&[Var<f64>]) -> Result<Var<f64>>,
{
    let leaves: Vec<Var<f64>> = inputs.iter().cloned().map(Var::leaf).collect();
    let out = loss(&leaves)?;
    let grads = backward(&out)?;

    let mut evaluations = 1;
    let mut per_input = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&leaves[idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut worst = 0.0f64;
        for e in 0..input.numel() {
            let mut probe = |delta: f64| -> Result<f64> {
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == idx {
                            let mut t = t.clone();
                            t.data_mut()[e] += delta;
                            Var::constant(t)
                        } else {
                            Var::constant(t.clone())
                        }
                    })
                    .collect();
                Ok(loss(&vars)?.value().item())
            };
            let numeric = (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP);
            evaluations += 2;
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        per_input,
        max_rel_error,
        evaluations,
    })
}
