//! Semantic jamming signal generators.
//!
//! All generators emit symbol-domain perturbations under an l2 power
//! budget: `||dx||_2 <= eps` for every output, every seed. The trainable
//! generator is input-agnostic by interface: it sees only a random trigger
//! and the power budget, never the victim signal.

mod gradient;
mod generator;
mod pam;
mod training;

pub use generator::{build_apg, Apg, ApgConfig};
pub use gradient::{fgsm, pgd, PGD_DEFAULT_STEPS, PGD_DEFAULT_STEP_FRAC};
pub use pam::{build_pam_stage, pam_calibrate, PamUnit};
pub use training::{
    train_apg, train_apg_worst_case, ApgTrainOpts, TrainStats, WorstCaseStack,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rome_nn::{NnError, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("negative power budget {0}")]
    NegativeBudget(f64),
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("configuration error: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Channel(#[from] rome_channel::ChannelError),
    #[error(transparent)]
    Model(#[from] rome_models::ModelError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// Projects a perturbation onto the l2 ball of radius `eps`: inputs inside
/// the ball pass through unchanged, outside ones are rescaled onto the
/// boundary.
pub fn project_l2(dx: &Tensor, eps: f64) -> Result<Tensor> {
    if eps < 0.0 {
        return Err(AttackError::NegativeBudget(eps));
    }
    let norm = dx.l2_norm();
    if norm <= eps {
        Ok(dx.clone())
    } else if norm == 0.0 {
        Ok(dx.clone())
    } else {
        Ok(dx.scale(eps / norm))
    }
}

/// Semantic-agnostic baseline: a complex Gaussian draw scaled to exactly
/// the power budget.
pub fn gaussian_jamming(eps: f64, symbols: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if eps < 0.0 {
        return Err(AttackError::NegativeBudget(eps));
    }
    if eps == 0.0 {
        return Ok(Tensor::zeros(&[2 * symbols]));
    }
    let comp = Normal::new(0.0, (0.5f64).sqrt()).expect("valid std");
    let raw = Tensor::from_vec((0..2 * symbols).map(|_| comp.sample(rng)).collect());
    let norm = raw.l2_norm();
    if norm == 0.0 {
        // Astronomically unlikely; retry once with a deterministic nudge.
        let mut v = vec![0.0; 2 * symbols];
        v[0] = 1.0;
        return Ok(Tensor::from_vec(v).scale(eps));
    }
    Ok(raw.scale(eps / norm))
}

/// CLI-facing attack description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AttackSpec {
    Gaussian { psr_db: f64 },
    Fgsm { psr_db: f64 },
    Pgd { psr_db: f64, steps: usize },
    Apg { psr_db: f64, checkpoint: String },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn project_inside_ball_unchanged() {
        let dx = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(project_l2(&dx, 10.0).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(project_l2(&dx, 5.0).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn project_outside_ball_rescales() {
        let dx = Tensor::from_vec(vec![3.0, 4.0]);
        let p = project_l2(&dx, 1.0).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-12);
        assert!((p.data()[1] - 0.8).abs() < 1e-12);
        assert!((p.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn project_rejects_negative_radius() {
        assert!(project_l2(&Tensor::from_vec(vec![1.0]), -0.1).is_err());
    }

    #[test]
    fn gaussian_zero_budget_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let j = gaussian_jamming(0.0, 6, &mut rng).unwrap();
        assert!(j.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_exactly_on_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            let eps = 0.01 + i as f64 * 0.03;
            let j = gaussian_jamming(eps, 12, &mut rng).unwrap();
            assert!((j.l2_norm() - eps).abs() < 1e-9);
        }
    }
}
