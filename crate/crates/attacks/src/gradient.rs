//! White-box gradient agents operating on the receiver-side feature
//! tensor, with l2-ball budgets.

use crate::{project_l2, AttackError, Result};
use rome_models::Classifier;
use rome_nn::{softmax_ce_grad, Tensor};

/// Per-sample gradient of the mean cross-entropy w.r.t. the victim input.
fn input_gradient(victim: &Classifier, features: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let tape = victim.graph.forward(std::slice::from_ref(features))?;
    let (_, dlogits) = softmax_ce_grad(tape.output(), labels)?;
    let grads = victim.graph.backward(&tape, &dlogits)?;
    Ok(grads.input_grads[0].clone())
}

fn scale_rows_to(tensor: &mut Tensor, norms: &[f64]) {
    let batch = tensor.shape()[0];
    for bi in 0..batch {
        let row = tensor.row_mut(bi);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            let s = norms[bi] / n;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Single-step l2 attack: the normalized input gradient scaled to the
/// budget. A zero gradient yields a zero perturbation (logged).
pub fn fgsm(
    victim: &Classifier,
    features: &Tensor,
    labels: &[usize],
    eps: &[f64],
) -> Result<Tensor> {
    let batch = features.shape()[0];
    if eps.len() != batch || labels.len() != batch {
        return Err(AttackError::InvalidConfig(format!(
            "batch {batch} vs {} budgets / {} labels",
            eps.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = eps.iter().find(|&&e| e < 0.0) {
        return Err(AttackError::NegativeBudget(bad));
    }
    let mut grad = input_gradient(victim, features, labels)?;
    for bi in 0..batch {
        let n = grad.row(bi).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            log::warn!("fgsm: zero input gradient for sample {bi}, emitting zero perturbation");
        }
    }
    scale_rows_to(&mut grad, eps);
    Ok(grad)
}

/// Iterative l2 ascent: normalized-gradient steps with projection onto the
/// budget ball after each step. `step_frac` is the step size as a fraction
/// of the budget (default 1/4 over 10 steps).
pub fn pgd(
    victim: &Classifier,
    features: &Tensor,
    labels: &[usize],
    eps: &[f64],
    steps: usize,
    step_frac: f64,
) -> Result<Tensor> {
    let batch = features.shape()[0];
    if eps.len() != batch || labels.len() != batch {
        return Err(AttackError::InvalidConfig(format!(
            "batch {batch} vs {} budgets / {} labels",
            eps.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = eps.iter().find(|&&e| e < 0.0) {
        return Err(AttackError::NegativeBudget(bad));
    }
    let mut delta = Tensor::zeros(features.shape());
    for _ in 0..steps {
        let perturbed = features.add(&delta)?;
        let grad = input_gradient(victim, &perturbed, labels)?;
        for bi in 0..batch {
            let gr = grad.row(bi);
            let gnorm = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm == 0.0 {
                continue;
            }
            let step = step_frac * eps[bi] / gnorm;
            let dr = delta.row_mut(bi);
            for (d, g) in dr.iter_mut().zip(gr.iter()) {
                *d += step * g;
            }
            let projected = project_l2(&Tensor::from_vec(dr.to_vec()), eps[bi])?;
            dr.copy_from_slice(projected.data());
        }
    }
    Ok(delta)
}

/// Default step-size fraction for the iterative agent.
pub const PGD_DEFAULT_STEP_FRAC: f64 = 0.25;
/// Default iteration count for the iterative agent.
pub const PGD_DEFAULT_STEPS: usize = 10;
