//! Power anticipation: channel-wise feature calibration conditioned on the
//! upcoming power budget.
//!
//! The calibration pipeline is: global average pooling of the feature maps,
//! prepend the budget to the pooled vector, two fully-connected layers,
//! min-max normalization to [0, 1], then per-channel scaling of the input
//! features. A constant pre-normalization vector calibrates to all-ones
//! (identity), keeping the map continuous.

use crate::{AttackError, Result};
use rand::Rng;
use rome_nn::graph::{Graph, NodeId, Op};
use rome_nn::{he_uniform, Tensor};

/// Stand-alone calibration parameters: two FC layers mapping the
/// `(C+1)`-vector `[eps, a_1..a_C]` to a `C`-vector.
#[derive(Debug, Clone)]
pub struct PamUnit {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl PamUnit {
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1_weight: he_uniform(&[channels, channels + 1], channels + 1, rng),
            fc1_bias: Tensor::zeros(&[channels]),
            fc2_weight: he_uniform(&[channels, channels], channels, rng),
            fc2_bias: Tensor::zeros(&[channels]),
        }
    }

    /// Identity unit for tests: drops the budget column and passes the
    /// pooled vector through both layers unchanged.
    pub fn identity(channels: usize) -> Self {
        let mut fc1 = Tensor::zeros(&[channels, channels + 1]);
        for c in 0..channels {
            fc1.data_mut()[c * (channels + 1) + c + 1] = 1.0;
        }
        Self {
            fc1_weight: fc1,
            fc1_bias: Tensor::zeros(&[channels]),
            fc2_weight: Tensor::eye(channels),
            fc2_bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc2_weight.shape()[0]
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| {
            let row = &w.data()[o * inp..(o + 1) * inp];
            b.data()[o] + row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

const SPAN_EPS: f64 = 1e-12;

/// Calibrates a single `[C, H, W]` feature tensor against a power budget.
pub fn pam_calibrate(features: &Tensor, eps: f64, unit: &PamUnit) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 3 || shape[0] != unit.channels() {
        return Err(AttackError::InvalidConfig(format!(
            "feature shape {shape:?} does not match a {}-channel calibration unit",
            unit.channels()
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;

    // Global average pooling, then the budget is prepended as side info.
    let mut pooled = Vec::with_capacity(c + 1);
    pooled.push(eps);
    for ch in 0..c {
        let sum: f64 = features.data()[ch * plane..(ch + 1) * plane].iter().sum();
        pooled.push(sum / plane as f64);
    }

    let hidden: Vec<f64> = affine(&unit.fc1_weight, &unit.fc1_bias, &pooled)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let raw = affine(&unit.fc2_weight, &unit.fc2_bias, &hidden);

    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gains: Vec<f64> = if hi - lo < SPAN_EPS {
        vec![1.0; c]
    } else {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };

    let mut out = features.clone();
    for ch in 0..c {
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v *= gains[ch];
        }
    }
    Ok(out)
}

/// Inserts the same calibration pipeline as graph nodes: pool, concat with
/// the budget input, two FC layers, min-max, channel scale.
pub fn build_pam_stage(
    graph: &mut Graph,
    features: NodeId,
    eps_input: NodeId,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let channels = graph.nodes[features].out_shape[0];
    let pooled = graph.push(Op::GlobalAvgPool, vec![features])?;
    let extended = graph.push(Op::Concat, vec![eps_input, pooled])?;
    let fc1 = graph.linear(extended, channels, rng)?;
    let act = graph.relu(fc1)?;
    let fc2 = graph.linear(act, channels, rng)?;
    let gains = graph.push(Op::MinMaxNorm, vec![fc2])?;
    Ok(graph.push(Op::ChannelScale, vec![features, gains])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_calibration_is_identity() {
        // fc2 = 0 makes the pre-normalization vector constant, which is
        // defined as the all-ones (no-op) calibration.
        let mut unit = PamUnit::identity(3);
        unit.fc2_weight = Tensor::zeros(&[3, 3]);
        let f = Tensor::new(vec![3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = pam_calibrate(&f, 0.5, &unit).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn minmax_hits_zero_and_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let unit = PamUnit::random(4, &mut rng);
        let f = Tensor::new(vec![4, 1, 1], vec![0.3, -1.2, 0.9, 2.0]).unwrap();
        let out = pam_calibrate(&f, 0.25, &unit).unwrap();
        // Recover the per-channel gains from the scaled output.
        let gains: Vec<f64> = (0..4)
            .map(|c| out.data()[c] / f.data()[c])
            .collect();
        let lo = gains.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = gains.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo.abs() < 1e-12, "min gain {lo}");
        assert!((hi - 1.0).abs() < 1e-12, "max gain {hi}");
    }

    #[test]
    fn hand_evaluated_identity_chain() {
        // f = [[2], [4]] (2 channels, 1x1 maps), eps = 0, FC stack passes
        // the pooled vector through: a = [2, 4] -> normalized [0, 1] ->
        // output [[0], [4]].
        let unit = PamUnit::identity(2);
        let f = Tensor::new(vec![2, 1, 1], vec![2.0, 4.0]).unwrap();
        let out = pam_calibrate(&f, 0.0, &unit).unwrap();
        assert_eq!(out.data(), &[0.0, 4.0]);
    }

    #[test]
    fn graph_stage_matches_standalone_unit() {
        // Build the graph stage, copy its FC parameters into a PamUnit,
        // and check both paths produce identical calibrations.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let f = g.input(&[3, 2, 2]);
        let e = g.input(&[1]);
        let out = build_pam_stage(&mut g, f, e, &mut rng).unwrap();
        g.set_output(out).unwrap();

        let linear_nodes: Vec<usize> = g
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Linear { .. }))
            .map(|n| n.id)
            .collect();
        let get = |id: usize| match &g.nodes[id].op {
            Op::Linear { weight, bias } => (weight.clone(), bias.clone()),
            _ => unreachable!(),
        };
        let (w1, b1) = get(linear_nodes[0]);
        let (w2, b2) = get(linear_nodes[1]);
        let unit = PamUnit {
            fc1_weight: w1,
            fc1_bias: b1,
            fc2_weight: w2,
            fc2_bias: b2,
        };

        let features =
            Tensor::new(vec![3, 2, 2], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let eps = 0.42;
        let direct = pam_calibrate(&features, eps, &unit).unwrap();

        let fb = Tensor::stack(&[features]).unwrap();
        let eb = Tensor::new(vec![1, 1], vec![eps]).unwrap();
        let tape = g.forward(&[fb, eb]).unwrap();
        for (a, b) in tape.output().data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
