//! Transmitter/receiver networks: a convolutional semantic encoder that
//! emits power-normalized channel symbols, and classifier heads that map
//! equalized symbols back to class probabilities.
//!
//! Topologies follow a fixed ladder of residual blocks whose channel counts
//! are scaled down by a configurable factor so everything trains on a CPU
//! in minutes.

pub mod data;

use rand::Rng;
use rome_nn::graph::{Graph, NodeId, Op};
use rome_nn::{argmax, softmax_rows, NnError, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("scale {scale} does not divide the channel ladder {ladder:?}")]
    InvalidScale { scale: usize, ladder: Vec<usize> },
    #[error("configuration error: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Unscaled channel counts of the encoder trunk; the terminal entry fixes
/// the symbol tensor depth.
pub const ENCODER_CHANNELS: [usize; 7] = [64, 64, 128, 128, 256, 256, 24];
/// Unscaled channel count of the classifier trunk.
pub const CLASSIFIER_CHANNELS: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-sample input shape `[c, h, w]`.
    pub input_shape: Vec<usize>,
    /// Divisor applied to every channel count.
    pub scale: usize,
    /// Number of classes.
    pub classes: usize,
    /// Per-symbol transmit power.
    pub power: f64,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 {
            return Err(ModelError::InvalidConfig(format!(
                "input shape must be [c, h, w], got {:?}",
                self.input_shape
            )));
        }
        if self.classes < 2 {
            return Err(ModelError::InvalidConfig("need at least 2 classes".into()));
        }
        if self.power <= 0.0 {
            return Err(ModelError::InvalidConfig("power must be positive".into()));
        }
        let mut ladder: Vec<usize> = ENCODER_CHANNELS.to_vec();
        ladder.push(CLASSIFIER_CHANNELS);
        if self.scale == 0 || ladder.iter().any(|c| c % self.scale != 0) {
            return Err(ModelError::InvalidScale {
                scale: self.scale,
                ladder,
            });
        }
        Ok(())
    }

    /// Stride of each trunk stage. Larger images keep a 4x4 terminal map;
    /// the 8x8 desk-scale input compresses to 2x2 so the jamming budget is
    /// a meaningful fraction of the transmit norm.
    fn strides(&self) -> Result<[usize; 7]> {
        match self.input_shape[1] {
            28 => Ok([1, 2, 2, 1, 2, 1, 1]),
            32 => Ok([1, 2, 2, 1, 2, 2, 1]),
            16 => Ok([1, 2, 2, 1, 1, 1, 1]),
            8 => Ok([1, 2, 1, 2, 1, 1, 1]),
            other => Err(ModelError::InvalidConfig(format!(
                "unsupported input height {other}; expected 8, 16, 28, or 32"
            ))),
        }
    }
}

/// Residual block: conv-relu-conv plus a skip path, then relu. The skip is
/// the identity when the shape is preserved, otherwise a 1x1 strided conv.
pub fn res_block(
    graph: &mut Graph,
    parent: NodeId,
    out_ch: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let sum = res_block_body(graph, parent, out_ch, stride, rng)?;
    Ok(graph.relu(sum)?)
}

/// Residual block without the trailing activation, for signal-emitting
/// heads that must produce signed values (channel symbols, perturbations).
pub fn res_block_linear(
    graph: &mut Graph,
    parent: NodeId,
    out_ch: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    res_block_body(graph, parent, out_ch, stride, rng)
}

fn res_block_body(
    graph: &mut Graph,
    parent: NodeId,
    out_ch: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let in_shape = graph.nodes[parent].out_shape.clone();
    let c1 = graph.conv2d(parent, out_ch, 3, stride, 1, rng)?;
    let r1 = graph.relu(c1)?;
    let c2 = graph.conv2d(r1, out_ch, 3, 1, 1, rng)?;
    let skip = if in_shape[0] == out_ch && stride == 1 {
        parent
    } else {
        graph.conv2d(parent, out_ch, 1, stride, 0, rng)?
    };
    Ok(graph.add(c2, skip)?)
}

/// Semantic encoder: image in, `2k` power-normalized reals out
/// (`k` complex channel symbols).
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub graph: Graph,
    pub symbols: usize,
    pub power: f64,
    /// Shape of the symbol tensor as seen by the receiver, `[c, h, w]`.
    pub feature_shape: Vec<usize>,
}

/// Builds the encoder trunk and records the symbol geometry.
pub fn build_encoder(config: &ModelConfig, rng: &mut impl Rng) -> Result<SemanticEncoder> {
    config.validate()?;
    let strides = config.strides()?;
    let mut graph = Graph::new();
    let image = graph.input(&config.input_shape);

    let stem_ch = ENCODER_CHANNELS[0] / config.scale;
    let stem = graph.conv2d(image, stem_ch, 3, strides[0], 1, rng)?;
    let mut node = graph.relu(stem)?;
    let last = ENCODER_CHANNELS.len() - 1;
    for stage in 1..last {
        node = res_block(
            &mut graph,
            node,
            ENCODER_CHANNELS[stage] / config.scale,
            strides[stage],
            rng,
        )?;
    }
    // The terminal block emits the raw symbol tensor: no trailing ReLU, so
    // symbols take both signs.
    node = res_block_linear(
        &mut graph,
        node,
        ENCODER_CHANNELS[last] / config.scale,
        strides[last],
        rng,
    )?;
    let feature_shape = graph.nodes[node].out_shape.clone();
    let flat_len: usize = feature_shape.iter().product();
    if flat_len % 2 != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "terminal feature count {flat_len} is odd; cannot pair into complex symbols"
        )));
    }
    let symbols = flat_len / 2;
    let flat = graph.flatten(node)?;
    let normalized = graph.push(
        Op::PowerNormalize {
            target: symbols as f64 * config.power,
        },
        vec![flat],
    )?;
    graph.set_output(normalized)?;
    Ok(SemanticEncoder {
        graph,
        symbols,
        power: config.power,
        feature_shape,
    })
}

impl SemanticEncoder {
    /// `[B, c, h, w]` images to `[B, 2k]` channel symbols.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let tape = self.graph.forward(std::slice::from_ref(images))?;
        Ok(tape.output().clone())
    }

    /// Reinterprets a `[B, 2k]` symbol batch as the receiver-side feature
    /// tensor `[B, c, h, w]`.
    pub fn symbols_to_features(&self, symbols: &Tensor) -> Result<Tensor> {
        let mut shape = vec![symbols.shape()[0]];
        shape.extend_from_slice(&self.feature_shape);
        Ok(symbols.reshape(&shape)?)
    }
}

/// Classifier head over the equalized symbol tensor. The graph emits
/// logits; probabilities come from a softmax at the call site, so the
/// same graph serves training, inference, and bound propagation.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub graph: Graph,
    pub classes: usize,
}

/// Classifier trunk per the channel ladder: two residual blocks, average
/// pooling over the full map, dense head.
pub fn build_classifier(
    config: &ModelConfig,
    feature_shape: &[usize],
    rng: &mut impl Rng,
) -> Result<Classifier> {
    config.validate()?;
    let ch = CLASSIFIER_CHANNELS / config.scale;
    let mut graph = Graph::new();
    let features = graph.input(feature_shape);
    let b1 = res_block(&mut graph, features, ch, 1, rng)?;
    let b2 = res_block(&mut graph, b1, ch, 1, rng)?;
    let pooled = graph.avg_pool2d(b2, feature_shape[1])?;
    let flat = graph.flatten(pooled)?;
    let logits = graph.linear(flat, config.classes, rng)?;
    graph.set_output(logits)?;
    Ok(Classifier {
        graph,
        classes: config.classes,
    })
}

impl Classifier {
    /// Logits for a `[B, c, h, w]` feature batch.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let tape = self.graph.forward(std::slice::from_ref(features))?;
        Ok(tape.output().clone())
    }

    /// Probability rows and per-sample argmax classes.
    pub fn classify(&self, features: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let logits = self.logits(features)?;
        let probs = softmax_rows(&logits);
        let classes = (0..probs.shape()[0]).map(|b| argmax(probs.row(b))).collect();
        Ok((probs, classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_shape: vec![1, 8, 8],
            scale: 8,
            classes: 10,
            power: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn encoder_symbol_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = build_encoder(&toy_config(), &mut rng).unwrap();
        let flat: usize = enc.feature_shape.iter().product();
        assert_eq!(2 * enc.symbols, flat);
        assert_eq!(enc.feature_shape[0], ENCODER_CHANNELS[6] / 8);
    }

    #[test]
    fn encoder_rejects_bad_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = toy_config();
        cfg.scale = 7;
        assert!(matches!(
            build_encoder(&cfg, &mut rng),
            Err(ModelError::InvalidScale { .. })
        ));
    }

    #[test]
    fn encode_zero_image_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = build_encoder(&toy_config(), &mut rng).unwrap();
        let image = Tensor::zeros(&[1, 1, 8, 8]);
        let x = enc.encode(&image).unwrap();
        assert!(x.all_finite());
    }

    #[test]
    fn encode_satisfies_power_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = build_encoder(&toy_config(), &mut rng).unwrap();
        for trial in 0..10 {
            let image = Tensor::new(
                vec![1, 1, 8, 8],
                (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let x = enc.encode(&image).unwrap();
            let sq: f64 = x.data().iter().map(|v| v * v).sum();
            let target = enc.symbols as f64 * enc.power;
            assert!(
                (sq - target).abs() < 1e-9,
                "trial {trial}: ||x||^2 = {sq}, want {target}"
            );
        }
    }

    #[test]
    fn classifier_zero_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = toy_config();
        let enc = build_encoder(&cfg, &mut rng).unwrap();
        let mut cls = build_classifier(&cfg, &enc.feature_shape, &mut rng).unwrap();
        // Zero the dense head.
        let last = cls.graph.output;
        if let Op::Linear { weight, bias } = &mut cls.graph.nodes[last].op {
            weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        } else {
            panic!("classifier head is not linear");
        }
        let features = Tensor::full(&[2, 3, 4, 4], 0.37);
        let (probs, _) = cls.classify(&features).unwrap();
        for &p in probs.data() {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = toy_config();
        let enc = build_encoder(&cfg, &mut rng).unwrap();
        let cls = build_classifier(&cfg, &enc.feature_shape, &mut rng).unwrap();
        let features = Tensor::new(
            vec![1, 3, 4, 4],
            (0..48).map(|i| (i as f64 * 0.13).sin()).collect(),
        )
        .unwrap();
        let (a, ca) = cls.classify(&features).unwrap();
        let (b, cb) = cls.classify(&features).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(ca, cb);
    }

    #[test]
    fn mnist_shape_encoder_builds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig {
            input_shape: vec![1, 28, 28],
            scale: 8,
            classes: 10,
            power: 1.0,
            seed: 0,
        };
        let enc = build_encoder(&cfg, &mut rng).unwrap();
        assert_eq!(enc.feature_shape, vec![3, 4, 4]);
        assert_eq!(enc.symbols, 24);
    }
}
