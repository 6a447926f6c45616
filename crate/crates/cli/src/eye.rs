//! Detector eye diagrams: mean level confidence as a function of realized
//! jamming power, and the property checks over the resulting curves.

use crate::metrics::EyeTable;
use anyhow::bail;
use rand::Rng;
use rome_attacks::{gaussian_jamming, Apg};
use rome_channel::ChannelModel;
use rome_defense::{receive, EnsembleStack, PowerLevelSet};
use rome_models::data::Dataset;
use rome_nn::Tensor;
use serde::Serialize;

/// Jamming source swept by the eye diagram. Outputs are rescaled to the
/// exact power under test, since the sweep is over realized power.
pub enum EyeAttack<'a> {
    Apg(&'a Apg),
    Gaussian,
}

/// Budget grid covering every level with `per_level` points: the clean
/// level spans `[0, eps_0]`, attack level i spans its interval.
pub fn default_eye_grid(levels: &PowerLevelSet, per_level: usize) -> Vec<f64> {
    let b = levels.boundaries();
    let mut grid = Vec::new();
    let mut lo = 0.0;
    for &hi in b {
        for j in 0..per_level {
            grid.push(lo + (hi - lo) * j as f64 / per_level as f64);
        }
        lo = hi;
    }
    grid.push(*b.last().expect("non-empty boundaries"));
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    grid
}

fn scale_rows_to_norm(rows: &mut Tensor, norm: f64) {
    let batch = rows.shape()[0];
    for bi in 0..batch {
        let row = rows.row_mut(bi);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            let s = norm / n;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean detector output per budget on the grid, averaged over at least
/// `samples` data points each.
pub fn eye_diagram(
    stack: &EnsembleStack,
    attack: &EyeAttack<'_>,
    grid: &[f64],
    data: &Dataset,
    samples: usize,
    channel: &ChannelModel,
    rng: &mut impl Rng,
) -> anyhow::Result<EyeTable> {
    if grid.is_empty() {
        bail!("empty budget grid");
    }
    let n = stack.levels.count();
    let total = samples.min(data.len()).max(1);
    let mut table = EyeTable {
        eps: grid.to_vec(),
        mean_pd: Vec::with_capacity(grid.len()),
    };

    for &eps in grid {
        let mut mean = vec![0.0; n];
        const BATCH: usize = 128;
        let mut done = 0;
        while done < total {
            let take = BATCH.min(total - done);
            let idx: Vec<usize> = (done..done + take).collect();
            let (images, _) = data.gather(&idx);
            let x = stack.encoder.encode(&images)?;

            let jam = if eps > 0.0 {
                let mut jam = match attack {
                    EyeAttack::Apg(apg) => apg.generate(&vec![eps; take], rng)?,
                    EyeAttack::Gaussian => {
                        let rows: Vec<Tensor> = (0..take)
                            .map(|_| gaussian_jamming(eps, stack.encoder.symbols, rng))
                            .collect::<rome_attacks::Result<_>>()?;
                        Tensor::stack(&rows)?
                    }
                };
                scale_rows_to_norm(&mut jam, eps);
                Some(jam)
            } else {
                None
            };

            let (equalized, _) = receive(&x, jam.as_ref(), channel, rng)?;
            let features = stack.encoder.symbols_to_features(&equalized)?;
            let decision = stack.decide(&features)?;
            for bi in 0..take {
                for (l, m) in mean.iter_mut().enumerate() {
                    *m += decision.detector.row(bi)[l];
                }
            }
            done += take;
        }
        mean.iter_mut().for_each(|v| *v /= total as f64);
        table.mean_pd.push(mean);
    }
    Ok(table)
}

/// Soft property report over an eye table. Only a too-coarse grid is a
/// hard error; every property outcome is reported, not asserted.
#[derive(Debug, Clone, Serialize)]
pub struct EyePropertyReport {
    /// Property 1: every row sums to one.
    pub rows_sum_to_one: bool,
    pub max_row_sum_error: f64,
    /// Property 2: fraction of interior grid points with concave curve,
    /// per level.
    pub concavity_fraction: Vec<f64>,
    pub concavity_pass: bool,
    /// Property 3: at each level's confidence peak, the level dominates
    /// the sum of its adjacent levels.
    pub peak_eps: Vec<f64>,
    pub dominance_pass: Vec<bool>,
    /// Property 4: detector mass near 0.5 at the interior level
    /// boundaries; one entry per boundary with the two adjacent levels'
    /// values.
    pub boundary_values: Vec<(f64, f64)>,
    pub boundary_pass: Vec<bool>,
}

const ROW_SUM_TOL: f64 = 1e-6;
const CONCAVITY_TOL: f64 = 0.05;
const CONCAVITY_FRACTION: f64 = 0.9;
const BOUNDARY_BAND: (f64, f64) = (0.3, 0.7);

pub fn verify_assumption_properties(
    eye: &EyeTable,
    levels: &PowerLevelSet,
) -> anyhow::Result<EyePropertyReport> {
    let n = levels.count();
    // Grid coarseness: at least 3 points per level interval.
    let mut lo = 0.0;
    for (level, &hi) in levels.boundaries().iter().enumerate() {
        let count = eye
            .eps
            .iter()
            .filter(|&&e| e >= lo - 1e-12 && e <= hi + 1e-12)
            .count();
        if count < 3 {
            bail!("grid too coarse: {count} points in level {level} interval [{lo}, {hi}]");
        }
        lo = hi;
    }

    let mut max_err = 0.0f64;
    for row in &eye.mean_pd {
        let sum: f64 = row.iter().sum();
        max_err = max_err.max((sum - 1.0).abs());
    }

    let curves: Vec<Vec<f64>> = (0..n)
        .map(|l| eye.mean_pd.iter().map(|row| row[l]).collect())
        .collect();

    let mut concavity_fraction = Vec::with_capacity(n);
    for curve in &curves {
        let mut ok = 0usize;
        let interior = curve.len().saturating_sub(2);
        for i in 1..curve.len() - 1 {
            let second = curve[i + 1] - 2.0 * curve[i] + curve[i - 1];
            if second <= CONCAVITY_TOL {
                ok += 1;
            }
        }
        concavity_fraction.push(if interior == 0 {
            1.0
        } else {
            ok as f64 / interior as f64
        });
    }

    let mut peak_eps = Vec::with_capacity(n);
    let mut dominance = Vec::with_capacity(n);
    for (l, curve) in curves.iter().enumerate() {
        let mut best = 0;
        for (i, v) in curve.iter().enumerate() {
            if *v > curve[best] {
                best = i;
            }
        }
        peak_eps.push(eye.eps[best]);
        let mut neighbors = 0.0;
        if l > 0 {
            neighbors += curves[l - 1][best];
        }
        if l + 1 < n {
            neighbors += curves[l + 1][best];
        }
        dominance.push(curve[best] > neighbors);
    }

    // Interior boundaries sit between adjacent levels; the last boundary
    // is the end of the attack range, not a decision boundary.
    let mut boundary_values = Vec::new();
    let mut boundary_pass = Vec::new();
    for (j, &b) in levels.boundaries()[..n - 1].iter().enumerate() {
        let mut nearest = 0;
        for (i, &e) in eye.eps.iter().enumerate() {
            if (e - b).abs() < (eye.eps[nearest] - b).abs() {
                nearest = i;
            }
        }
        let pair = (curves[j][nearest], curves[j + 1][nearest]);
        boundary_values.push(pair);
        boundary_pass.push(
            pair.0 >= BOUNDARY_BAND.0
                && pair.0 <= BOUNDARY_BAND.1
                && pair.1 >= BOUNDARY_BAND.0
                && pair.1 <= BOUNDARY_BAND.1,
        );
    }

    Ok(EyePropertyReport {
        rows_sum_to_one: max_err <= ROW_SUM_TOL,
        max_row_sum_error: max_err,
        concavity_pass: concavity_fraction.iter().all(|&f| f >= CONCAVITY_FRACTION),
        concavity_fraction,
        peak_eps,
        dominance_pass: dominance,
        boundary_values,
        boundary_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tent_levels() -> PowerLevelSet {
        PowerLevelSet::from_boundaries(vec![0.2, 0.4, 0.6, 0.8]).unwrap()
    }

    /// Hand-built ideal detector: each level's confidence is a difference
    /// of logistic transitions at its decision boundaries, so rows sum to
    /// one exactly and boundary values sit near 0.5.
    fn ideal_eye(levels: &PowerLevelSet) -> EyeTable {
        let grid = default_eye_grid(levels, 6);
        let n = levels.count();
        let interior = &levels.boundaries()[..n - 1];
        let tau = 0.05;
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x / tau).exp());
        let mean_pd: Vec<Vec<f64>> = grid
            .iter()
            .map(|&e| {
                (0..n)
                    .map(|l| {
                        let left = if l == 0 { 1.0 } else { sigmoid(e - interior[l - 1]) };
                        let right = if l + 1 == n {
                            0.0
                        } else {
                            sigmoid(e - interior[l])
                        };
                        left - right
                    })
                    .collect()
            })
            .collect();
        EyeTable { eps: grid, mean_pd }
    }

    #[test]
    fn ideal_detector_passes_all_properties() {
        let levels = tent_levels();
        let eye = ideal_eye(&levels);
        let report = verify_assumption_properties(&eye, &levels).unwrap();
        assert!(report.rows_sum_to_one);
        assert!(report.concavity_pass, "{:?}", report.concavity_fraction);
        assert!(report.dominance_pass.iter().all(|&p| p));
        assert!(report.boundary_pass.iter().all(|&p| p), "{:?}", report.boundary_values);
    }

    #[test]
    fn uniform_detector_fails_dominance() {
        let levels = tent_levels();
        let grid = default_eye_grid(&levels, 6);
        let eye = EyeTable {
            mean_pd: vec![vec![0.25; 4]; grid.len()],
            eps: grid,
        };
        let report = verify_assumption_properties(&eye, &levels).unwrap();
        assert!(report.rows_sum_to_one);
        assert!(report.dominance_pass.iter().all(|&p| !p));
    }

    #[test]
    fn coarse_grid_is_an_error() {
        let levels = tent_levels();
        let eye = EyeTable {
            eps: vec![0.0, 0.5, 0.8],
            mean_pd: vec![vec![0.25; 4]; 3],
        };
        assert!(verify_assumption_properties(&eye, &levels).is_err());
    }

    #[test]
    fn grid_covers_every_level() {
        let levels = tent_levels();
        let grid = default_eye_grid(&levels, 4);
        assert!(grid[0] == 0.0);
        assert!((grid.last().unwrap() - 0.8).abs() < 1e-12);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }
}
