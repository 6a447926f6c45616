//! Generator training loops.
//!
//! Both trainers ascend the defender's loss through the full receive
//! pipeline: encode, fade, superpose the jamming signal, add noise,
//! equalize, classify. The victim models stay frozen; only generator
//! parameters move. Power budgets are sampled uniformly in dB so training
//! covers every level of the grid evenly.

use crate::generator::Apg;
use crate::{AttackError, Result};
use rand::Rng;
use rome_channel::{
    complex_scale, complex_scale_adjoint, draw_channel, equalize, psr_to_epsilon, sample_noise,
    ChannelDraw, ChannelModel,
};
use rome_models::data::Dataset;
use rome_models::{Classifier, SemanticEncoder};
use rome_nn::loss::LOG_FLOOR;
use rome_nn::{
    cosine_lr, softmax_backward, softmax_ce_grad, softmax_rows, AdamState, Graph, Tensor,
};

#[derive(Debug, Clone)]
pub struct ApgTrainOpts {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Budget range in PSR dB; sampled uniformly per sample.
    pub psr_range_db: (f64, f64),
}

impl Default for ApgTrainOpts {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 64,
            lr: 1e-3,
            psr_range_db: (-15.0, -1.0),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    /// Mean attacker objective per epoch (higher is a stronger attack).
    pub epoch_losses: Vec<f64>,
}

/// Per-sample channel context for one batch.
struct BatchChannel {
    draws: Vec<ChannelDraw>,
    /// Noise already divided by the legitimate gain, `[B, 2k]`.
    equalized_noise: Tensor,
}

fn sample_batch_channel(
    model: &ChannelModel,
    batch: usize,
    symbols: usize,
    rng: &mut impl Rng,
) -> Result<BatchChannel> {
    let mut draws = Vec::with_capacity(batch);
    let mut noise_rows = Vec::with_capacity(batch);
    for _ in 0..batch {
        let draw = draw_channel(model, rng);
        let noise = sample_noise(symbols, draw.noise_var, rng)?;
        noise_rows.push(equalize(&noise, draw.h)?);
        draws.push(draw);
    }
    Ok(BatchChannel {
        draws,
        equalized_noise: Tensor::stack(&noise_rows)?,
    })
}

/// Receiver view after equalization: `x + (h_jam/h) dx + n/h` per sample.
fn receive_equalized(x: &Tensor, jamming: &Tensor, ch: &BatchChannel) -> Result<Tensor> {
    let batch = x.shape()[0];
    let mut out = x.clone();
    for bi in 0..batch {
        let draw = &ch.draws[bi];
        let ratio = draw.h_jam / draw.h;
        let jam_row = complex_scale(&Tensor::from_vec(jamming.row(bi).to_vec()), ratio);
        let row = out.row_mut(bi);
        for (j, v) in row.iter_mut().enumerate() {
            *v += jam_row.data()[j] + ch.equalized_noise.row(bi)[j];
        }
    }
    Ok(out)
}

/// Pulls a gradient on the equalized receive signal back to the transmitted
/// jamming signal: multiply per sample by conj(h_jam/h).
fn jamming_gradient(d_received: &Tensor, ch: &BatchChannel) -> Tensor {
    let batch = d_received.shape()[0];
    let rows: Vec<Tensor> = (0..batch)
        .map(|bi| {
            let ratio = ch.draws[bi].h_jam / ch.draws[bi].h;
            complex_scale_adjoint(&Tensor::from_vec(d_received.row(bi).to_vec()), ratio)
        })
        .collect();
    Tensor::stack(&rows).expect("uniform rows")
}

fn sample_budgets(
    opts: &ApgTrainOpts,
    power: f64,
    batch: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let (lo, hi) = opts.psr_range_db;
    (0..batch)
        .map(|_| {
            let psr = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            psr_to_epsilon(psr, power)
        })
        .collect()
}

fn negate(grads: &mut [Vec<Tensor>]) {
    for group in grads.iter_mut() {
        for g in group.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Trains the generator against a single frozen victim classifier.
///
/// Each step samples triggers, victim signals from the attacker's surrogate
/// of the data distribution, channel realizations from the attacker's
/// statistics, and budgets uniform in dB; then ascends the victim's
/// cross-entropy by gradient on the generator parameters.
pub fn train_apg(
    apg: &mut Apg,
    encoder: &SemanticEncoder,
    victim: &Classifier,
    channel: &ChannelModel,
    data: &Dataset,
    opts: &ApgTrainOpts,
    rng: &mut impl Rng,
) -> Result<TrainStats> {
    let mut adam = AdamState::new(&apg.graph, opts.lr);
    let steps_per_epoch = data.len().div_ceil(opts.batch).max(1);
    let total_steps = (opts.epochs * steps_per_epoch) as u64;
    let mut stats = TrainStats::default();
    let mut step = 0u64;

    for _ in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for idx in data.epoch_batches(opts.batch, rng) {
            let (images, labels) = data.gather(&idx);
            let x = encoder.encode(&images)?;
            let batch = idx.len();

            let eps = sample_budgets(opts, encoder.power, batch, rng);
            let triggers = apg.sample_triggers(batch, rng);
            let budgets = Tensor::new(vec![batch, 1], eps.clone())?;
            let apg_tape = apg.graph.forward(&[triggers, budgets])?;
            let jamming = apg_tape.output().clone();

            let ch = sample_batch_channel(channel, batch, encoder.symbols, rng)?;
            let received = receive_equalized(&x, &jamming, &ch)?;
            let features = encoder.symbols_to_features(&received)?;

            let victim_tape = victim.graph.forward(std::slice::from_ref(&features))?;
            let (loss, dlogits) = softmax_ce_grad(victim_tape.output(), &labels)?;
            if !loss.is_finite() {
                return Err(AttackError::NonFiniteLoss {
                    step: step as usize,
                    loss,
                });
            }
            epoch_loss += loss;
            batches += 1.0;

            let victim_grads = victim.graph.backward(&victim_tape, &dlogits)?;
            let d_received = victim_grads.input_grads[0].reshape(x.shape())?;
            let d_jamming = jamming_gradient(&d_received, &ch);

            let mut apg_grads = apg.graph.backward(&apg_tape, &d_jamming)?;
            negate(&mut apg_grads.param_grads);
            adam.lr = cosine_lr(step, total_steps, opts.lr)?;
            let flat = apg_grads.flat();
            let mut params = apg.graph.param_tensors_mut();
            adam.apply(&mut params, &flat)?;
            step += 1;
        }
        stats.epoch_losses.push(epoch_loss / batches.max(1.0));
    }
    Ok(stats)
}

/// Frozen defender stack visible to the worst-case attacker.
pub struct WorstCaseStack<'a> {
    pub encoder: &'a SemanticEncoder,
    pub classifiers: &'a [Classifier],
    /// Detector graph with inputs (feature tensor, prediction map) and one
    /// logit per power level.
    pub detector: &'a Graph,
    /// Level boundaries `eps_0 < .. < eps_{N-1}`; level i >= 1 covers
    /// `[eps_{i-1}, eps_i]`, level 0 is the no-attack class.
    pub level_boundaries: &'a [f64],
}

fn level_of(boundaries: &[f64], eps: f64) -> usize {
    if eps <= 0.0 {
        return 0;
    }
    for (i, &b) in boundaries.iter().enumerate().skip(1) {
        if eps <= b {
            return i;
        }
    }
    boundaries.len() - 1
}

/// Trains the generator against the whole defender stack: one cross-entropy
/// on the detector-weighted inner ensemble of the base classifiers, plus the
/// detector's own cross-entropy at the true power level. Ensemble weights
/// are treated as constants within a step; gradients reach them through the
/// detector-loss term instead.
pub fn train_apg_worst_case(
    apg: &mut Apg,
    stack: &WorstCaseStack<'_>,
    channel: &ChannelModel,
    data: &Dataset,
    opts: &ApgTrainOpts,
    rng: &mut impl Rng,
) -> Result<TrainStats> {
    let n_models = stack.classifiers.len();
    if n_models != stack.level_boundaries.len() {
        return Err(AttackError::InvalidConfig(format!(
            "{n_models} classifiers vs {} level boundaries",
            stack.level_boundaries.len()
        )));
    }
    let classes = stack.classifiers[0].classes;
    let encoder = stack.encoder;
    let mut adam = AdamState::new(&apg.graph, opts.lr);
    let steps_per_epoch = data.len().div_ceil(opts.batch).max(1);
    let total_steps = (opts.epochs * steps_per_epoch) as u64;
    let mut stats = TrainStats::default();
    let mut step = 0u64;

    for _ in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for idx in data.epoch_batches(opts.batch, rng) {
            let (images, labels) = data.gather(&idx);
            let x = encoder.encode(&images)?;
            let batch = idx.len();

            let eps = sample_budgets(opts, encoder.power, batch, rng);
            let levels: Vec<usize> = eps
                .iter()
                .map(|&e| level_of(stack.level_boundaries, e))
                .collect();

            let triggers = apg.sample_triggers(batch, rng);
            let budgets = Tensor::new(vec![batch, 1], eps.clone())?;
            let apg_tape = apg.graph.forward(&[triggers, budgets])?;
            let jamming = apg_tape.output().clone();

            let ch = sample_batch_channel(channel, batch, encoder.symbols, rng)?;
            let received = receive_equalized(&x, &jamming, &ch)?;
            let features = encoder.symbols_to_features(&received)?;

            // Base classifiers and the prediction map.
            let mut tapes = Vec::with_capacity(n_models);
            let mut probs = Vec::with_capacity(n_models);
            for cls in stack.classifiers {
                let tape = cls.graph.forward(std::slice::from_ref(&features))?;
                probs.push(softmax_rows(tape.output()));
                tapes.push(tape);
            }
            let mut pmap = Tensor::zeros(&[batch, n_models, classes]);
            for (i, p) in probs.iter().enumerate() {
                for bi in 0..batch {
                    let dst = (bi * n_models + i) * classes;
                    pmap.data_mut()[dst..dst + classes].copy_from_slice(p.row(bi));
                }
            }

            let det_tape = stack.detector.forward(&[features.clone(), pmap])?;
            let pd = softmax_rows(det_tape.output());
            let weights = softmax_rows(&pd);

            // Inner-ensembled probabilities and the ensemble loss.
            let mut ensembled = Tensor::zeros(&[batch, classes]);
            for bi in 0..batch {
                for i in 0..n_models {
                    let w = weights.row(bi)[i];
                    for c in 0..classes {
                        ensembled.row_mut(bi)[c] += w * probs[i].row(bi)[c];
                    }
                }
            }
            let inv = 1.0 / batch as f64;
            let mut base_loss = 0.0;
            let mut d_ensembled = Tensor::zeros(&[batch, classes]);
            for bi in 0..batch {
                let p = ensembled.row(bi)[labels[bi]].max(LOG_FLOOR);
                base_loss -= p.ln() * inv;
                d_ensembled.row_mut(bi)[labels[bi]] = -inv / p;
            }

            let (det_loss, d_det_logits) = softmax_ce_grad(det_tape.output(), &levels)?;
            let loss = base_loss + det_loss;
            if !loss.is_finite() {
                return Err(AttackError::NonFiniteLoss {
                    step: step as usize,
                    loss,
                });
            }
            epoch_loss += loss;
            batches += 1.0;

            // Backward through the detector: gradients for both of its
            // inputs (feature tensor and prediction map).
            let det_grads = stack.detector.backward(&det_tape, &d_det_logits)?;
            let mut d_features = det_grads.input_grads[0].clone();
            let d_pmap = &det_grads.input_grads[1];

            // Combine both paths into each classifier's probability rows,
            // then pull back through softmax and the classifier graph.
            for (i, tape) in tapes.iter().enumerate() {
                let mut d_probs = Tensor::zeros(&[batch, classes]);
                for bi in 0..batch {
                    let w = weights.row(bi)[i];
                    let src = (bi * n_models + i) * classes;
                    let dst = d_probs.row_mut(bi);
                    for c in 0..classes {
                        dst[c] = w * d_ensembled.row(bi)[c] + d_pmap.data()[src + c];
                    }
                }
                let dlogits = softmax_backward(&probs[i], &d_probs)?;
                let grads = stack.classifiers[i].graph.backward(tape, &dlogits)?;
                d_features.add_assign(&grads.input_grads[0])?;
            }

            let d_received = d_features.reshape(x.shape())?;
            let d_jamming = jamming_gradient(&d_received, &ch);
            let mut apg_grads = apg.graph.backward(&apg_tape, &d_jamming)?;
            negate(&mut apg_grads.param_grads);
            adam.lr = cosine_lr(step, total_steps, opts.lr)?;
            let flat = apg_grads.flat();
            let mut params = apg.graph.param_tensors_mut();
            adam.apply(&mut params, &flat)?;
            step += 1;
        }
        stats.epoch_losses.push(epoch_loss / batches.max(1.0));
    }
    Ok(stats)
}
