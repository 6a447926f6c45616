//! Input regions: l_p balls around a flattened feature vector.

use crate::{Result, VerifierError};
use rome_nn::Tensor;
use serde::{Deserialize, Serialize};

/// Supported perturbation norm orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    One,
    Two,
    Inf,
}

impl NormOrder {
    /// Holder-conjugate exponent: 1 <-> inf, 2 <-> 2.
    pub fn dual(self) -> NormOrder {
        match self {
            NormOrder::One => NormOrder::Inf,
            NormOrder::Two => NormOrder::Two,
            NormOrder::Inf => NormOrder::One,
        }
    }

    pub fn vector_norm(self, v: &[f64]) -> f64 {
        match self {
            NormOrder::One => v.iter().map(|x| x.abs()).sum(),
            NormOrder::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormOrder::Inf => v.iter().fold(0.0, |acc, x| acc.max(x.abs())),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NormOrder::One => "1",
            NormOrder::Two => "2",
            NormOrder::Inf => "inf",
        }
    }
}

/// Dual exponent of an l_p norm.
pub fn dual_exponent(p: NormOrder) -> NormOrder {
    p.dual()
}

/// `{x : ||x - center||_p <= radius}` in the flattened input space.
#[derive(Debug, Clone)]
pub struct InputRegion {
    pub center: Tensor,
    pub radius: f64,
    pub norm: NormOrder,
}

impl InputRegion {
    pub fn new(center: Tensor, radius: f64, norm: NormOrder) -> Result<Self> {
        if radius < 0.0 {
            return Err(VerifierError::InvalidRegion(format!(
                "negative radius {radius}"
            )));
        }
        Ok(Self {
            center,
            radius,
            norm,
        })
    }

    /// Origin-centered region, the reference choice for the intrinsic
    /// robustness metric.
    pub fn origin(dim: usize, radius: f64, norm: NormOrder) -> Result<Self> {
        Self::new(Tensor::zeros(&[dim]), radius, norm)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_pairs() {
        assert_eq!(dual_exponent(NormOrder::Two), NormOrder::Two);
        assert_eq!(dual_exponent(NormOrder::One), NormOrder::Inf);
        assert_eq!(dual_exponent(NormOrder::Inf), NormOrder::One);
    }

    #[test]
    fn norms_agree_with_definitions() {
        let v = [3.0, -4.0];
        assert_eq!(NormOrder::One.vector_norm(&v), 7.0);
        assert_eq!(NormOrder::Two.vector_norm(&v), 5.0);
        assert_eq!(NormOrder::Inf.vector_norm(&v), 4.0);
    }

    #[test]
    fn region_rejects_negative_radius() {
        assert!(InputRegion::origin(3, -1.0, NormOrder::Two).is_err());
    }
}
