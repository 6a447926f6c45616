//! Per-neuron ReLU relaxation.
//!
//! Stable neurons stay exact (identity or zero). Unstable neurons get the
//! triangle relaxation: the chord through `(l, 0)` and `(u, u)` from above,
//! and the steeper of the two tangents (slope 0 or 1, chosen by `|u|` vs
//! `|l|`) from below. Both lines bracket ReLU on `[l, u]`.

use crate::{Result, VerifierError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronRelaxation {
    pub upper_slope: f64,
    pub upper_intercept: f64,
    pub lower_slope: f64,
    pub lower_intercept: f64,
}

impl NeuronRelaxation {
    pub fn identity() -> Self {
        Self {
            upper_slope: 1.0,
            upper_intercept: 0.0,
            lower_slope: 1.0,
            lower_intercept: 0.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            upper_slope: 0.0,
            upper_intercept: 0.0,
            lower_slope: 0.0,
            lower_intercept: 0.0,
        }
    }
}

/// Relaxes one ReLU neuron with pre-activation interval `[lower, upper]`.
pub fn relax_relu(lower: f64, upper: f64) -> Result<NeuronRelaxation> {
    if lower > upper {
        return Err(VerifierError::BadInterval { lower, upper });
    }
    if lower >= 0.0 {
        return Ok(NeuronRelaxation::identity());
    }
    if upper <= 0.0 {
        return Ok(NeuronRelaxation::zero());
    }
    let slope = upper / (upper - lower);
    Ok(NeuronRelaxation {
        upper_slope: slope,
        upper_intercept: -slope * lower,
        lower_slope: if upper.abs() >= lower.abs() { 1.0 } else { 0.0 },
        lower_intercept: 0.0,
    })
}
