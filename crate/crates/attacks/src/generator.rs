//! The trainable perturbation generator.
//!
//! A random trigger is mapped to a spatial tensor, refined by a residual
//! trunk whose blocks are calibrated against the requested power budget,
//! and projected onto the l2 ball of that budget. Disabling the
//! calibration stages yields the fixed-power baseline generator: the
//! budget then only enters at the final projection.

use crate::pam::build_pam_stage;
use crate::{AttackError, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rome_models::{res_block, res_block_linear};
use rome_nn::graph::{Graph, Op};
use rome_nn::Tensor;

#[derive(Debug, Clone)]
pub struct ApgConfig {
    /// Dimension of the Gaussian trigger vector.
    pub trigger_dim: usize,
    /// Symbol tensor shape `[c, h, w]` (must hold `2k` reals).
    pub feature_shape: Vec<usize>,
    /// Channel-count divisor, shared with the encoder ladder.
    pub scale: usize,
    /// When false, the calibration stages are omitted and the budget only
    /// acts through the final projection (fixed-power baseline).
    pub use_pam: bool,
}

impl Default for ApgConfig {
    fn default() -> Self {
        Self {
            trigger_dim: 128,
            feature_shape: vec![3, 4, 4],
            scale: 8,
            use_pam: true,
        }
    }
}

/// Trainable jamming generator. Graph inputs: trigger `[trigger_dim]` and
/// budget `[1]`; output: `[2k]` perturbation with `||dx||_2 <= eps`.
#[derive(Debug, Clone)]
pub struct Apg {
    pub graph: Graph,
    pub trigger_dim: usize,
    pub symbols: usize,
    pub uses_pam: bool,
}

/// Trunk channel ladder before the terminal block, unscaled.
const TRUNK_CHANNELS: [usize; 5] = [64, 128, 128, 256, 256];

pub fn build_apg(config: &ApgConfig, rng: &mut impl Rng) -> Result<Apg> {
    if config.feature_shape.len() != 3 {
        return Err(AttackError::InvalidConfig(format!(
            "feature shape must be [c, h, w], got {:?}",
            config.feature_shape
        )));
    }
    let flat: usize = config.feature_shape.iter().product();
    if flat % 2 != 0 {
        return Err(AttackError::InvalidConfig(
            "feature element count must be even (complex pairs)".into(),
        ));
    }
    if config.scale == 0 || TRUNK_CHANNELS.iter().any(|c| c % config.scale != 0) {
        return Err(AttackError::InvalidConfig(format!(
            "scale {} does not divide the trunk ladder",
            config.scale
        )));
    }

    let (h, w) = (config.feature_shape[1], config.feature_shape[2]);
    let stem_ch = TRUNK_CHANNELS[0] / config.scale;

    let mut graph = Graph::new();
    let trigger = graph.input(&[config.trigger_dim]);
    let budget = graph.input(&[1]);

    let stem = graph.linear(trigger, stem_ch * h * w, rng)?;
    let spatial = graph.push(
        Op::Reshape {
            shape: vec![stem_ch, h, w],
        },
        vec![stem],
    )?;
    let mut node = graph.relu(spatial)?;
    for ch in TRUNK_CHANNELS {
        node = res_block(&mut graph, node, ch / config.scale, 1, rng)?;
        if config.use_pam {
            node = build_pam_stage(&mut graph, node, budget, rng)?;
        }
    }
    // Terminal block without activation: the perturbation is signed.
    let before_terminal = graph.nodes.len();
    node = res_block_linear(&mut graph, node, config.feature_shape[0], 1, rng)?;
    // Damp the terminal block so raw outputs start well inside typical
    // budget balls; the projection then stays inactive early in training
    // and gradients reach the trunk unattenuated.
    for node_ref in &mut graph.nodes[before_terminal..] {
        if let Op::Conv2d { weight, bias, .. } = &mut node_ref.op {
            weight.data_mut().iter_mut().for_each(|v| *v *= 0.05);
            bias.data_mut().iter_mut().for_each(|v| *v *= 0.05);
        }
    }
    let flat_node = graph.flatten(node)?;
    let projected = graph.push(Op::ProjectL2Ball, vec![flat_node, budget])?;
    graph.set_output(projected)?;

    Ok(Apg {
        graph,
        trigger_dim: config.trigger_dim,
        symbols: flat / 2,
        uses_pam: config.use_pam,
    })
}

impl Apg {
    /// Samples a standard-normal trigger batch.
    pub fn sample_triggers(&self, batch: usize, rng: &mut impl Rng) -> Tensor {
        let data = (0..batch * self.trigger_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor::new(vec![batch, self.trigger_dim], data).expect("consistent shape")
    }

    /// Generates perturbations for explicit triggers and per-sample budgets.
    pub fn generate_with_triggers(&self, triggers: &Tensor, eps: &[f64]) -> Result<Tensor> {
        if let Some(&bad) = eps.iter().find(|&&e| e < 0.0) {
            return Err(AttackError::NegativeBudget(bad));
        }
        let batch = triggers.shape()[0];
        if eps.len() != batch {
            return Err(AttackError::InvalidConfig(format!(
                "{} budgets for a batch of {batch}",
                eps.len()
            )));
        }
        let budgets = Tensor::new(vec![batch, 1], eps.to_vec())?;
        let tape = self.graph.forward(&[triggers.clone(), budgets])?;
        Ok(tape.output().clone())
    }

    /// Samples fresh triggers and generates a perturbation batch.
    pub fn generate(&self, eps: &[f64], rng: &mut impl Rng) -> Result<Tensor> {
        let triggers = self.sample_triggers(eps.len(), rng);
        self.generate_with_triggers(&triggers, eps)
    }

    /// Single perturbation of budget `eps`.
    pub fn generate_one(&self, eps: f64, rng: &mut impl Rng) -> Result<Tensor> {
        Ok(self.generate(&[eps], rng)?.unstack(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_apg(use_pam: bool, seed: u64) -> Apg {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_apg(
            &ApgConfig {
                trigger_dim: 16,
                feature_shape: vec![3, 2, 2],
                scale: 16,
                use_pam,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_gives_zero_perturbation() {
        let apg = toy_apg(true, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dx = apg.generate_one(0.0, &mut rng).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn budget_contract_over_random_draws() {
        let apg = toy_apg(true, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..1000 {
            let eps = (i % 97) as f64 * 0.01;
            let dx = apg.generate_one(eps, &mut rng).unwrap();
            assert!(
                dx.l2_norm() <= eps + 1e-9,
                "draw {i}: ||dx|| = {} > {eps}",
                dx.l2_norm()
            );
        }
    }

    #[test]
    fn different_triggers_differ() {
        let apg = toy_apg(true, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mean_cos = 0.0;
        const PAIRS: usize = 50;
        for _ in 0..PAIRS {
            let a = apg.generate_one(0.5, &mut rng).unwrap();
            let b = apg.generate_one(0.5, &mut rng).unwrap();
            let cos = a.dot(&b).unwrap() / (a.l2_norm() * b.l2_norm());
            mean_cos += cos / PAIRS as f64;
        }
        assert!(mean_cos < 0.99, "mean cosine similarity {mean_cos}");
    }

    #[test]
    fn rejects_negative_budget() {
        let apg = toy_apg(true, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(apg.generate(&[-0.5], &mut rng).is_err());
    }

    #[test]
    fn pam_free_variant_builds_and_projects() {
        let apg = toy_apg(false, 8);
        assert!(!apg.uses_pam);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dx = apg.generate_one(0.3, &mut rng).unwrap();
        assert!(dx.l2_norm() <= 0.3 + 1e-9);
    }
}
