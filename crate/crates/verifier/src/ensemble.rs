//! Ensemble-level bounds: detector-weighted combinations of per-classifier
//! guarantees.

use crate::bounds::{concretize, LinearBoundMap};
use crate::region::InputRegion;
use crate::{Result, VerifierError};
use rome_nn::Tensor;

/// Tolerance for matching a detector output against a declared case.
const CASE_TOL: f64 = 0.05;

/// Weighted sum of the concretized per-classifier bounds. Sound for the
/// ensemble output because the ensemble is the same convex combination of
/// the classifier outputs.
pub fn ensemble_bounds(
    maps: &[LinearBoundMap],
    detector: &[f64],
    region: &InputRegion,
) -> Result<(Vec<f64>, Vec<f64>)> {
    validate_weights(maps.len(), detector)?;
    let dim = maps[0].output_dim();
    let mut upper = vec![0.0; dim];
    let mut lower = vec![0.0; dim];
    for (map, &w) in maps.iter().zip(detector.iter()) {
        if map.output_dim() != dim || map.input_dim() != maps[0].input_dim() {
            return Err(VerifierError::DimensionMismatch(
                "classifier bound maps must share dimensions".into(),
            ));
        }
        let (u, l) = concretize(map, region)?;
        for i in 0..dim {
            upper[i] += w * u[i];
            lower[i] += w * l[i];
        }
    }
    Ok((upper, lower))
}

/// The ensemble's own linear bounds: the detector-weighted sum of the
/// per-classifier affine maps (weights are nonnegative, so upper stays
/// upper and lower stays lower).
pub fn ensemble_map(maps: &[LinearBoundMap], detector: &[f64]) -> Result<LinearBoundMap> {
    validate_weights(maps.len(), detector)?;
    let (d, d1) = (maps[0].output_dim(), maps[0].input_dim());
    let mut out = LinearBoundMap {
        upper_w: Tensor::zeros(&[d, d1]),
        upper_b: Tensor::zeros(&[d]),
        lower_w: Tensor::zeros(&[d, d1]),
        lower_b: Tensor::zeros(&[d]),
    };
    for (map, &w) in maps.iter().zip(detector.iter()) {
        if map.output_dim() != d || map.input_dim() != d1 {
            return Err(VerifierError::DimensionMismatch(
                "classifier bound maps must share dimensions".into(),
            ));
        }
        for (dst, src) in out.upper_w.data_mut().iter_mut().zip(map.upper_w.data()) {
            *dst += w * src;
        }
        for (dst, src) in out.upper_b.data_mut().iter_mut().zip(map.upper_b.data()) {
            *dst += w * src;
        }
        for (dst, src) in out.lower_w.data_mut().iter_mut().zip(map.lower_w.data()) {
            *dst += w * src;
        }
        for (dst, src) in out.lower_b.data_mut().iter_mut().zip(map.lower_b.data()) {
            *dst += w * src;
        }
    }
    Ok(out)
}

fn validate_weights(n: usize, detector: &[f64]) -> Result<()> {
    if detector.len() != n || n == 0 {
        return Err(VerifierError::DimensionMismatch(format!(
            "{n} classifiers vs {} detector entries",
            detector.len()
        )));
    }
    if detector.iter().any(|&w| w < 0.0) {
        return Err(VerifierError::CaseMismatch(
            "detector entries must be nonnegative".into(),
        ));
    }
    Ok(())
}

/// Operating regime of the detector output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleCase {
    /// One dominant level.
    Confident,
    /// Two adjacent levels with (near) equal mass.
    Confused,
    /// Two adjacent levels sharing the mass unevenly.
    General,
}

/// Ensemble distortion/robustness guarantees from per-classifier values.
///
/// Returns an upper bound on the ensemble distortion (per class) and a
/// lower bound on the ensemble robustness:
/// confident -> the dominant level's values; confused -> the midpoint of
/// the two active levels; general -> the detector-weighted sum over the
/// two active levels.
pub fn ensemble_distortion(
    distortions: &[Vec<f64>],
    robustness: &[f64],
    detector: &[f64],
    case: EnsembleCase,
) -> Result<(Vec<f64>, f64)> {
    let n = detector.len();
    if distortions.len() != n || robustness.len() != n || n == 0 {
        return Err(VerifierError::DimensionMismatch(format!(
            "{} distortions / {} robustness values / {n} detector entries",
            distortions.len(),
            robustness.len()
        )));
    }
    let top = argmax(detector);
    match case {
        EnsembleCase::Confident => {
            let rest: f64 = detector
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != top)
                .map(|(_, &w)| w)
                .sum();
            if rest > CASE_TOL {
                return Err(VerifierError::CaseMismatch(format!(
                    "off-level mass {rest:.3} exceeds the confident tolerance"
                )));
            }
            Ok((distortions[top].clone(), robustness[top]))
        }
        EnsembleCase::Confused => {
            let (k, mass) = adjacent_pair(detector, top)?;
            if (detector[k] - detector[k + 1]).abs() > CASE_TOL {
                return Err(VerifierError::CaseMismatch(format!(
                    "levels {k} and {} are not balanced",
                    k + 1
                )));
            }
            if 1.0 - mass > CASE_TOL {
                return Err(VerifierError::CaseMismatch(
                    "significant mass outside the two active levels".into(),
                ));
            }
            let b = mid(&distortions[k], &distortions[k + 1]);
            Ok((b, (robustness[k] + robustness[k + 1]) / 2.0))
        }
        EnsembleCase::General => {
            let (k, mass) = adjacent_pair(detector, top)?;
            if 1.0 - mass > CASE_TOL {
                return Err(VerifierError::CaseMismatch(
                    "significant mass outside the two active levels".into(),
                ));
            }
            let (wa, wb) = (detector[k], detector[k + 1]);
            let b = distortions[k]
                .iter()
                .zip(distortions[k + 1].iter())
                .map(|(x, y)| wa * x + wb * y)
                .collect();
            Ok((b, wa * robustness[k] + wb * robustness[k + 1]))
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The adjacent pair `(k, k+1)` holding the top mass, and their combined
/// weight.
fn adjacent_pair(detector: &[f64], top: usize) -> Result<(usize, f64)> {
    let n = detector.len();
    if n < 2 {
        return Err(VerifierError::CaseMismatch(
            "need at least two levels for a two-level case".into(),
        ));
    }
    let left = if top == 0 { f64::NEG_INFINITY } else { detector[top - 1] };
    let right = if top + 1 >= n {
        f64::NEG_INFINITY
    } else {
        detector[top + 1]
    };
    let k = if right >= left { top } else { top - 1 };
    Ok((k, detector[k] + detector[k + 1]))
}

fn mid(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| (x + y) / 2.0).collect()
}
