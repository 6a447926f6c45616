//! Defender-side training: joint end-to-end pretraining, adversarial
//! training of classifier heads, ladder acquisition across power levels,
//! and detector training.

use crate::levels::PowerLevelSet;
use crate::mpd::Mpd;
use crate::pipeline::receive;
use crate::prediction::PredictionMap;
use crate::{DefenseError, Result};
use rand::Rng;
use rome_attacks::{gaussian_jamming, pgd, Apg};
use rome_channel::ChannelModel;
use rome_models::data::Dataset;
use rome_models::{Classifier, SemanticEncoder};
use rome_nn::{cosine_lr, softmax_ce_grad, AdamState, Tensor};

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub pgd_steps: usize,
    pub pgd_step_frac: f64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 128,
            lr: 1e-3,
            pgd_steps: 10,
            pgd_step_frac: 0.25,
        }
    }
}

/// Inner-maximization agent used while training a defender model.
pub enum TrainAttack<'a> {
    /// No perturbation (standard training).
    None,
    /// Iterative gradient agent crafted against the model being trained.
    SelfPgd,
    /// Iterative gradient agent crafted against a fixed victim.
    PgdAgainst(&'a Classifier),
    /// Trainable generator (full-knowledge defense).
    Apg(&'a Apg),
    /// Power-matched Gaussian baseline.
    Gaussian,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    /// `(budget, level)` pairs recorded for adversarial samples.
    pub samples: Vec<(f64, usize)>,
}

const SAMPLE_LOG_CAP: usize = 10_000;
/// Loss blow-up factor that counts as divergence.
const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive divergent epochs before aborting.
const DIVERGENCE_PATIENCE: usize = 3;

fn check_divergence(log: &TrainLog, state: &mut usize) -> Result<()> {
    let first = *log.epoch_losses.first().expect("at least one epoch");
    let last = *log.epoch_losses.last().expect("at least one epoch");
    if !last.is_finite() {
        return Err(DefenseError::Divergence {
            epoch: log.epoch_losses.len(),
            loss: last,
        });
    }
    if last > DIVERGENCE_FACTOR * first.max(1e-9) {
        *state += 1;
        if *state >= DIVERGENCE_PATIENCE {
            return Err(DefenseError::Divergence {
                epoch: log.epoch_losses.len(),
                loss: last,
            });
        }
    } else {
        *state = 0;
    }
    Ok(())
}

/// End-to-end training of the encoder and the standard classifier through
/// the (equalized) channel.
pub fn train_joint(
    encoder: &mut SemanticEncoder,
    classifier: &mut Classifier,
    channel: &ChannelModel,
    data: &Dataset,
    opts: &TrainOpts,
    rng: &mut impl Rng,
) -> Result<TrainLog> {
    let mut enc_adam = AdamState::new(&encoder.graph, opts.lr);
    let mut cls_adam = AdamState::new(&classifier.graph, opts.lr);
    let steps_per_epoch = data.len().div_ceil(opts.batch).max(1);
    let total = (opts.epochs * steps_per_epoch) as u64;
    let mut log = TrainLog::default();
    let mut diverging = 0usize;
    let mut step = 0u64;

    for _ in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for idx in data.epoch_batches(opts.batch, rng) {
            let (images, labels) = data.gather(&idx);
            let enc_tape = encoder.graph.forward(std::slice::from_ref(&images))?;
            let x = enc_tape.output().clone();
            let (equalized, _) = receive(&x, None, channel, rng)?;
            let features = encoder.symbols_to_features(&equalized)?;

            let cls_tape = classifier.graph.forward(std::slice::from_ref(&features))?;
            let (loss, dlogits) = softmax_ce_grad(cls_tape.output(), &labels)?;
            epoch_loss += loss;
            batches += 1.0;

            let cls_grads = classifier.graph.backward(&cls_tape, &dlogits)?;
            // After equalization the channel is additive, so the gradient
            // w.r.t. the transmitted symbols is the feature gradient.
            let dx = cls_grads.input_grads[0].reshape(x.shape())?;
            let enc_grads = encoder.graph.backward(&enc_tape, &dx)?;

            let lr = cosine_lr(step, total, opts.lr)?;
            cls_adam.lr = lr;
            enc_adam.lr = lr;
            let flat = cls_grads.flat();
            let mut params = classifier.graph.param_tensors_mut();
            cls_adam.apply(&mut params, &flat)?;
            let flat = enc_grads.flat();
            let mut params = encoder.graph.param_tensors_mut();
            enc_adam.apply(&mut params, &flat)?;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / batches.max(1.0));
        check_divergence(&log, &mut diverging)?;
    }
    Ok(log)
}

/// Builds the perturbed receiver-side features for one training batch.
/// Transmit-side attacks ride through the channel; gradient agents act on
/// the equalized features directly.
#[allow(clippy::too_many_arguments)]
fn attacked_features(
    encoder: &SemanticEncoder,
    target: &Classifier,
    attack: &TrainAttack<'_>,
    x: &Tensor,
    labels: &[usize],
    eps: &[f64],
    channel: &ChannelModel,
    opts: &TrainOpts,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let batch = x.shape()[0];
    match attack {
        TrainAttack::None => {
            let (equalized, _) = receive(x, None, channel, rng)?;
            Ok(encoder.symbols_to_features(&equalized)?)
        }
        TrainAttack::Gaussian => {
            let rows: Vec<Tensor> = eps
                .iter()
                .map(|&e| gaussian_jamming(e, encoder.symbols, rng))
                .collect::<rome_attacks::Result<_>>()?;
            let jam = Tensor::stack(&rows)?;
            let (equalized, _) = receive(x, Some(&jam), channel, rng)?;
            Ok(encoder.symbols_to_features(&equalized)?)
        }
        TrainAttack::Apg(apg) => {
            let jam = apg.generate(eps, rng)?;
            let (equalized, _) = receive(x, Some(&jam), channel, rng)?;
            Ok(encoder.symbols_to_features(&equalized)?)
        }
        TrainAttack::SelfPgd | TrainAttack::PgdAgainst(_) => {
            let victim = match attack {
                TrainAttack::PgdAgainst(v) => v,
                _ => target,
            };
            let (equalized, _) = receive(x, None, channel, rng)?;
            let clean = encoder.symbols_to_features(&equalized)?;
            if eps.iter().all(|&e| e == 0.0) {
                return Ok(clean);
            }
            let delta = pgd(
                victim,
                &clean,
                labels,
                eps,
                opts.pgd_steps,
                opts.pgd_step_frac,
            )?;
            let mut out = clean;
            for bi in 0..batch {
                let row = out.row_mut(bi);
                for (v, d) in row.iter_mut().zip(delta.row(bi)) {
                    *v += d;
                }
            }
            Ok(out)
        }
    }
}

/// Min-max training of a classifier head: per batch, sample a budget in
/// the interval, craft the inner perturbation, descend the outer loss.
/// The encoder stays frozen.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train(
    classifier: &mut Classifier,
    encoder: &SemanticEncoder,
    attack: &TrainAttack<'_>,
    eps_interval: (f64, f64),
    channel: &ChannelModel,
    data: &Dataset,
    opts: &TrainOpts,
    rng: &mut impl Rng,
) -> Result<TrainLog> {
    let (lo, hi) = eps_interval;
    if lo < 0.0 || hi < lo {
        return Err(DefenseError::InvalidConfig(format!(
            "bad budget interval [{lo}, {hi}]"
        )));
    }
    let mut adam = AdamState::new(&classifier.graph, opts.lr);
    let steps_per_epoch = data.len().div_ceil(opts.batch).max(1);
    let total = (opts.epochs * steps_per_epoch) as u64;
    let mut log = TrainLog::default();
    let mut diverging = 0usize;
    let mut step = 0u64;

    for _ in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for idx in data.epoch_batches(opts.batch, rng) {
            let (images, labels) = data.gather(&idx);
            let x = encoder.encode(&images)?;
            let eps: Vec<f64> = (0..idx.len())
                .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
                .collect();
            let features = attacked_features(
                encoder, classifier, attack, &x, &labels, &eps, channel, opts, rng,
            )?;

            let tape = classifier.graph.forward(std::slice::from_ref(&features))?;
            let (loss, dlogits) = softmax_ce_grad(tape.output(), &labels)?;
            epoch_loss += loss;
            batches += 1.0;

            let grads = classifier.graph.backward(&tape, &dlogits)?;
            adam.lr = cosine_lr(step, total, opts.lr)?;
            let flat = grads.flat();
            let mut params = classifier.graph.param_tensors_mut();
            adam.apply(&mut params, &flat)?;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / batches.max(1.0));
        check_divergence(&log, &mut diverging)?;
    }
    Ok(log)
}

/// Acquires the base-classifier ladder: index 0 is the standard model,
/// index `i` is adversarially trained over the level-`i` budget interval,
/// warm-started from its predecessor (or from the standard model when
/// `chain_from_previous` is off).
#[allow(clippy::too_many_arguments)]
pub fn acquire_base_classifiers(
    standard: &Classifier,
    encoder: &SemanticEncoder,
    levels: &PowerLevelSet,
    attack: &TrainAttack<'_>,
    channel: &ChannelModel,
    data: &Dataset,
    opts: &TrainOpts,
    chain_from_previous: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Classifier>> {
    let mut ladder = vec![standard.clone()];
    for level in 1..levels.count() {
        let mut next = if chain_from_previous {
            ladder[level - 1].clone()
        } else {
            standard.clone()
        };
        let interval = levels.interval(level)?;
        adversarial_train(
            &mut next, encoder, attack, interval, channel, data, opts, rng,
        )?;
        ladder.push(next);
    }
    Ok(ladder)
}

/// Detector training: every batch draws one power level, crafts a matching
/// perturbation (or none for the clean level), builds the prediction map
/// with the frozen ladder, and descends the detector's cross-entropy on the
/// level label. With `self_at_budget`, the detector itself is additionally
/// hardened by an iterative agent on its feature input.
#[allow(clippy::too_many_arguments)]
pub fn train_mpd(
    mpd: &mut Mpd,
    encoder: &SemanticEncoder,
    classifiers: &[Classifier],
    levels: &PowerLevelSet,
    attack: &TrainAttack<'_>,
    channel: &ChannelModel,
    data: &Dataset,
    opts: &TrainOpts,
    self_at_budget: Option<f64>,
    rng: &mut impl Rng,
) -> Result<TrainLog> {
    if classifiers.is_empty() {
        return Err(DefenseError::InvalidConfig("empty ladder".into()));
    }
    let n = levels.count();
    if mpd.levels != n {
        return Err(DefenseError::InvalidLevels(format!(
            "detector has {} outputs for {n} levels",
            mpd.levels
        )));
    }
    let mut adam = AdamState::new(&mpd.graph, opts.lr);
    let steps_per_epoch = data.len().div_ceil(opts.batch).max(1);
    let total = (opts.epochs * steps_per_epoch) as u64;
    let mut log = TrainLog::default();
    let mut diverging = 0usize;
    let mut step = 0u64;

    for _ in 0..opts.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for idx in data.epoch_batches(opts.batch, rng) {
            let (images, labels) = data.gather(&idx);
            let x = encoder.encode(&images)?;
            let batch = idx.len();

            let level = rng.gen_range(0..n);
            let eps: Vec<f64> = (0..batch)
                .map(|_| levels.sample_epsilon(level, rng))
                .collect::<Result<_>>()?;
            let mut features = attacked_features(
                encoder,
                &classifiers[0],
                if level == 0 { &TrainAttack::None } else { attack },
                &x,
                &labels,
                &eps,
                channel,
                opts,
                rng,
            )?;
            if level > 0 && log.samples.len() < SAMPLE_LOG_CAP {
                log.samples.extend(eps.iter().map(|&e| (e, level)));
            }

            if let Some(budget) = self_at_budget {
                features = harden_features(mpd, classifiers, &features, level, budget, opts)?;
            }

            let map = prediction_map(classifiers, &features)?;
            let tape = mpd
                .graph
                .forward(&[features.clone(), map.tensor().clone()])?;
            let level_labels = vec![level; batch];
            let (loss, dlogits) = softmax_ce_grad(tape.output(), &level_labels)?;
            epoch_loss += loss;
            batches += 1.0;

            let grads = mpd.graph.backward(&tape, &dlogits)?;
            adam.lr = cosine_lr(step, total, opts.lr)?;
            let flat = grads.flat();
            let mut params = mpd.graph.param_tensors_mut();
            adam.apply(&mut params, &flat)?;
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / batches.max(1.0));
        check_divergence(&log, &mut diverging)?;
    }
    Ok(log)
}

/// Iterative ascent on the detector loss w.r.t. its feature input (map held
/// fixed while crafting), then the map is rebuilt from the perturbed
/// features for the actual training sample.
fn harden_features(
    mpd: &Mpd,
    classifiers: &[Classifier],
    features: &Tensor,
    level: usize,
    budget: f64,
    opts: &TrainOpts,
) -> Result<Tensor> {
    let batch = features.shape()[0];
    let mut adv = features.clone();
    let level_labels = vec![level; batch];
    for _ in 0..opts.pgd_steps {
        let map = prediction_map(classifiers, &adv)?;
        let tape = mpd.graph.forward(&[adv.clone(), map.tensor().clone()])?;
        let (_, dlogits) = softmax_ce_grad(tape.output(), &level_labels)?;
        let grads = mpd.graph.backward(&tape, &dlogits)?;
        let gf = &grads.input_grads[0];
        for bi in 0..batch {
            let gr = gf.row(bi);
            let gnorm = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm == 0.0 {
                continue;
            }
            let step = opts.pgd_step_frac * budget / gnorm;
            let base = features.row(bi);
            let row = adv.row_mut(bi);
            for (j, v) in row.iter_mut().enumerate() {
                *v += step * gr[j];
            }
            // Project the accumulated offset back onto the budget ball.
            let mut off: Vec<f64> = row.iter().zip(base.iter()).map(|(a, b)| a - b).collect();
            let onorm = off.iter().map(|v| v * v).sum::<f64>().sqrt();
            if onorm > budget {
                let s = budget / onorm;
                off.iter_mut().for_each(|v| *v *= s);
            }
            for (j, v) in row.iter_mut().enumerate() {
                *v = base[j] + off[j];
            }
        }
    }
    Ok(adv)
}

/// Prediction map of the frozen ladder on a feature batch.
pub fn prediction_map(classifiers: &[Classifier], features: &Tensor) -> Result<PredictionMap> {
    let logits: Vec<Tensor> = classifiers
        .iter()
        .map(|c| c.logits(features))
        .collect::<rome_models::Result<_>>()?;
    Ok(PredictionMap::from_logits(&logits)?)
}
