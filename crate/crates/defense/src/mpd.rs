//! Multi-level perturbation detector: a dual-branch classifier over the
//! received feature tensor and the prediction map, emitting one logit per
//! power level.
//!
//! The signal branch is a deep residual path over the feature tensor. The
//! map branch pools each prediction row through the norm group (l1, l2,
//! max, min), convolves the raw map for depth, and merges both streams.
//! A dense fusion head produces the level logits.

use crate::prediction::PredictionMap;
use crate::{DefenseError, Result};
use rand::Rng;
use rome_models::res_block;
use rome_nn::graph::{Graph, Op};
use rome_nn::{softmax_rows, Tensor};

#[derive(Debug, Clone)]
pub struct MpdConfig {
    /// Number of power levels (detector classes), including no-attack.
    pub levels: usize,
    /// Classifier count feeding the prediction map (equals `levels`).
    pub map_rows: usize,
    /// Class count of the prediction map columns.
    pub classes: usize,
    /// Feature tensor shape `[c, h, w]`.
    pub feature_shape: Vec<usize>,
    /// Channel divisor shared with the rest of the stack.
    pub scale: usize,
}

/// Unscaled channel count of the signal branch.
const SIGNAL_CHANNELS: usize = 256;
/// Signal-branch depth (residual blocks).
const SIGNAL_BLOCKS: usize = 4;
/// Channels of the map-branch convolution.
const MAP_CONV_CHANNELS: usize = 8;
/// Width of the per-branch embedding layers.
const EMBED_WIDTH: usize = 32;

#[derive(Debug, Clone)]
pub struct Mpd {
    pub graph: Graph,
    pub levels: usize,
}

pub fn build_mpd(config: &MpdConfig, rng: &mut impl Rng) -> Result<Mpd> {
    if config.levels < 2 {
        return Err(DefenseError::InvalidLevels(
            "detector needs at least two levels".into(),
        ));
    }
    if config.feature_shape.len() != 3 {
        return Err(DefenseError::InvalidConfig(format!(
            "feature shape must be [c, h, w], got {:?}",
            config.feature_shape
        )));
    }
    if config.scale == 0 || SIGNAL_CHANNELS % config.scale != 0 {
        return Err(DefenseError::InvalidConfig(format!(
            "scale {} does not divide the detector trunk",
            config.scale
        )));
    }

    let mut graph = Graph::new();
    let features = graph.input(&config.feature_shape);
    let pmap = graph.input(&[config.map_rows, config.classes]);

    // Signal branch: deep conv path on the raw received tensor.
    let ch = SIGNAL_CHANNELS / config.scale;
    let mut node = features;
    for _ in 0..SIGNAL_BLOCKS {
        node = res_block(&mut graph, node, ch, 1, rng)?;
    }
    let pooled = graph.avg_pool2d(node, 2)?;
    let sig_flat = graph.flatten(pooled)?;
    let sig_embed = graph.linear(sig_flat, EMBED_WIDTH, rng)?;
    let sig_feat = graph.relu(sig_embed)?;

    // Map branch: norm-pooling features plus a conv path over the raw map.
    let lp = graph.push(Op::RowLpPool, vec![pmap])?;
    let lp_flat = graph.flatten(lp)?;
    let map_img = graph.push(
        Op::Reshape {
            shape: vec![1, config.map_rows, config.classes],
        },
        vec![pmap],
    )?;
    let conv1 = graph.conv2d(map_img, MAP_CONV_CHANNELS, 3, 1, 1, rng)?;
    let conv1_act = graph.relu(conv1)?;
    let conv2 = graph.conv2d(conv1_act, MAP_CONV_CHANNELS, 3, 1, 1, rng)?;
    let conv2_act = graph.relu(conv2)?;
    let conv_flat = graph.flatten(conv2_act)?;
    let map_cat = graph.push(Op::Concat, vec![lp_flat, conv_flat])?;
    let map_embed = graph.linear(map_cat, EMBED_WIDTH, rng)?;
    let map_feat = graph.relu(map_embed)?;

    // Fusion head.
    let fused = graph.push(Op::Concat, vec![sig_feat, map_feat])?;
    let logits = graph.linear(fused, config.levels, rng)?;
    graph.set_output(logits)?;

    Ok(Mpd {
        graph,
        levels: config.levels,
    })
}

impl Mpd {
    /// Level logits for a feature batch and its prediction map.
    pub fn logits(&self, features: &Tensor, map: &PredictionMap) -> Result<Tensor> {
        let tape = self
            .graph
            .forward(&[features.clone(), map.tensor().clone()])?;
        Ok(tape.output().clone())
    }

    /// Softmaxed level probabilities `p_d`, `[B, N]`.
    pub fn detect(&self, features: &Tensor, map: &PredictionMap) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(features, map)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_mpd(seed: u64) -> Mpd {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_mpd(
            &MpdConfig {
                levels: 4,
                map_rows: 4,
                classes: 10,
                feature_shape: vec![3, 4, 4],
                scale: 8,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn toy_map(batch: usize) -> PredictionMap {
        let logits: Vec<Tensor> = (0..4)
            .map(|i| {
                Tensor::new(
                    vec![batch, 10],
                    (0..batch * 10).map(|j| ((i + j) as f64 * 0.37).sin()).collect(),
                )
                .unwrap()
            })
            .collect();
        PredictionMap::from_logits(&logits).unwrap()
    }

    #[test]
    fn zeroed_head_gives_uniform_levels() {
        let mut mpd = toy_mpd(0);
        let head = mpd.graph.output;
        if let Op::Linear { weight, bias } = &mut mpd.graph.nodes[head].op {
            weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let features = Tensor::full(&[2, 3, 4, 4], 0.21);
        let pd = mpd.detect(&features, &toy_map(2)).unwrap();
        for &p in pd.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn detect_is_deterministic_and_normalized() {
        let mpd = toy_mpd(1);
        let features = Tensor::new(
            vec![3, 3, 4, 4],
            (0..144).map(|i| (i as f64 * 0.11).cos()).collect(),
        )
        .unwrap();
        let map = toy_map(3);
        let a = mpd.detect(&features, &map).unwrap();
        let b = mpd.detect(&features, &map).unwrap();
        assert_eq!(a.data(), b.data());
        for bi in 0..3 {
            let sum: f64 = a.row(bi).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mpd = toy_mpd(2);
        let bad = Tensor::full(&[1, 3, 2, 2], 0.0);
        assert!(mpd.detect(&bad, &toy_map(1)).is_err());
    }
}
