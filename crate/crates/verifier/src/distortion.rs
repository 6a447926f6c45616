//! Distortion bounds and the scalar robustness metric.

use crate::bounds::{concretize, LinearBoundMap};
use crate::propagate::propagate;
use crate::region::{InputRegion, NormOrder};
use crate::Result;
use rome_nn::graph::Graph;

/// Certified output distortion over a region, with its constituent terms.
#[derive(Debug, Clone)]
pub struct DistortionReport {
    /// Per-class distortion `B = max upper - min lower`.
    pub distortion: Vec<f64>,
    /// Scalar robustness `r` (nonpositive; closer to zero is more robust).
    pub robustness: f64,
    /// `radius * (||w_up||_q + ||w_lo||_q)` per row.
    pub dual_term: Vec<f64>,
    /// `(w_up - w_lo) . center` per row.
    pub center_term: Vec<f64>,
    /// `b_up - b_lo` per row.
    pub bias_gap: Vec<f64>,
}

/// Distortion of an output-node bound map at the region's center:
/// `B = radius (||w_up||_q + ||w_lo||_q) + (w_up - w_lo) center + b_up - b_lo`.
pub fn distortion_from_map(map: &LinearBoundMap, region: &InputRegion) -> Result<DistortionReport> {
    let q = region.norm.dual();
    let d = map.output_dim();
    let mut dual_term = Vec::with_capacity(d);
    let mut center_term = Vec::with_capacity(d);
    let mut bias_gap = Vec::with_capacity(d);
    let mut distortion = Vec::with_capacity(d);
    for i in 0..d {
        let wu = map.upper_row(i);
        let wl = map.lower_row(i);
        let dual = region.radius * (q.vector_norm(wu) + q.vector_norm(wl));
        let center: f64 = wu
            .iter()
            .zip(wl.iter())
            .zip(region.center.data().iter())
            .map(|((u, l), c)| (u - l) * c)
            .sum();
        let gap = map.upper_b.data()[i] - map.lower_b.data()[i];
        dual_term.push(dual);
        center_term.push(center);
        bias_gap.push(gap);
        distortion.push(dual + center + gap);
    }
    let robustness = robustness_from_map(map, region.norm);
    Ok(DistortionReport {
        distortion,
        robustness,
        dual_term,
        center_term,
        bias_gap,
    })
}

/// Propagates bounds and reports the per-class distortion over the region.
/// The result equals `max upper - min lower` from concretization.
pub fn distortion_bound(graph: &Graph, region: &InputRegion) -> Result<DistortionReport> {
    let map = propagate(graph, region)?;
    let report = distortion_from_map(&map, region)?;
    debug_assert!({
        let (upper, lower) = concretize(&map, region)?;
        report
            .distortion
            .iter()
            .zip(upper.iter().zip(lower.iter()))
            .all(|(b, (u, l))| (b - (u - l)).abs() <= 1e-9 * (1.0 + b.abs()))
    });
    Ok(report)
}

/// Input-independent distortion: maximizes the center term over all
/// transmit vectors with `||center||_2 <= sqrt(transmit_energy)`, giving
/// `radius (||w_up||_q + ||w_lo||_q) + sqrt(kP) ||w_up - w_lo||_2 + b_up - b_lo`.
pub fn distortion_max_from_map(
    map: &LinearBoundMap,
    region: &InputRegion,
    transmit_energy: f64,
) -> Result<Vec<f64>> {
    if transmit_energy < 0.0 {
        return Err(crate::VerifierError::InvalidRegion(format!(
            "negative transmit energy {transmit_energy}"
        )));
    }
    let q = region.norm.dual();
    let amp = transmit_energy.sqrt();
    Ok((0..map.output_dim())
        .map(|i| {
            let wu = map.upper_row(i);
            let wl = map.lower_row(i);
            let diff: Vec<f64> = wu.iter().zip(wl.iter()).map(|(u, l)| u - l).collect();
            region.radius * (q.vector_norm(wu) + q.vector_norm(wl))
                + amp * NormOrder::Two.vector_norm(&diff)
                + (map.upper_b.data()[i] - map.lower_b.data()[i])
        })
        .collect())
}

/// Propagating variant of [`distortion_max_from_map`].
pub fn distortion_bound_max(
    graph: &Graph,
    region: &InputRegion,
    transmit_energy: f64,
) -> Result<Vec<f64>> {
    let map = propagate(graph, region)?;
    distortion_max_from_map(&map, region, transmit_energy)
}

/// Scalar robustness of a bound map:
/// `r = -( || ||w_up||_q + ||w_lo||_q ||_p + || ||w_up - w_lo||_2 ||_p + || b_up - b_lo ||_p )`,
/// where the inner norms run over rows and the outer over classes.
pub fn robustness_from_map(map: &LinearBoundMap, p: NormOrder) -> f64 {
    let q = p.dual();
    let d = map.output_dim();
    let mut dual_rows = Vec::with_capacity(d);
    let mut diff_rows = Vec::with_capacity(d);
    let mut bias_rows = Vec::with_capacity(d);
    for i in 0..d {
        let wu = map.upper_row(i);
        let wl = map.lower_row(i);
        dual_rows.push(q.vector_norm(wu) + q.vector_norm(wl));
        let diff: Vec<f64> = wu.iter().zip(wl.iter()).map(|(u, l)| u - l).collect();
        diff_rows.push(NormOrder::Two.vector_norm(&diff));
        bias_rows.push(map.upper_b.data()[i] - map.lower_b.data()[i]);
    }
    -(p.vector_norm(&dual_rows) + p.vector_norm(&diff_rows) + p.vector_norm(&bias_rows))
}

/// Robustness of a graph over a reference region. ReLU relaxation depends
/// on the region through the intermediate intervals, so the region choice
/// is part of the metric's definition; affine graphs are region-free.
pub fn robustness(graph: &Graph, region: &InputRegion) -> Result<f64> {
    let map = propagate(graph, region)?;
    Ok(robustness_from_map(&map, region.norm))
}
