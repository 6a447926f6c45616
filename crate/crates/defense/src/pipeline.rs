//! The receive-and-classify pipeline shared by training, evaluation, and
//! the experiment drivers.

use crate::levels::PowerLevelSet;
use crate::mpd::Mpd;
use crate::prediction::{ensemble, PredictionMap};
use crate::training::prediction_map;
use crate::Result;
use rand::Rng;
use rome_attacks::{fgsm, gaussian_jamming, pgd, Apg};
use rome_channel::{draw_channel, equalize, transmit, ChannelDraw, ChannelModel};
use rome_models::data::Dataset;
use rome_models::{Classifier, SemanticEncoder};
use rome_nn::{argmax, Tensor};

/// Passes a symbol batch through per-sample channel draws and equalizes at
/// the receiver: row i becomes `x_i + (h_jam/h) dx_i + n/h`.
pub fn receive(
    x: &Tensor,
    jamming: Option<&Tensor>,
    model: &ChannelModel,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<ChannelDraw>)> {
    let batch = x.shape()[0];
    let mut rows = Vec::with_capacity(batch);
    let mut draws = Vec::with_capacity(batch);
    for bi in 0..batch {
        let draw = draw_channel(model, rng);
        let x_row = Tensor::from_vec(x.row(bi).to_vec());
        let jam_row = jamming.map(|j| Tensor::from_vec(j.row(bi).to_vec()));
        let received = transmit(&x_row, jam_row.as_ref(), &draw, rng)?;
        rows.push(equalize(&received, draw.h)?);
        draws.push(draw);
    }
    Ok((Tensor::stack(&rows)?, draws))
}

/// The trained defender bundle.
#[derive(Debug, Clone)]
pub struct EnsembleStack {
    pub encoder: SemanticEncoder,
    pub classifiers: Vec<Classifier>,
    pub mpd: Mpd,
    pub levels: PowerLevelSet,
}

/// One inference through the full receiver.
#[derive(Debug, Clone)]
pub struct EnsembleDecision {
    pub map: PredictionMap,
    /// Detector probabilities `[B, N]`.
    pub detector: Tensor,
    /// Ensembled probabilities `[B, C]`.
    pub probabilities: Tensor,
    pub picks: Vec<usize>,
}

impl EnsembleStack {
    /// Detect, weigh, and ensemble one equalized feature batch.
    pub fn decide(&self, features: &Tensor) -> Result<EnsembleDecision> {
        let map = prediction_map(&self.classifiers, features)?;
        let detector = self.mpd.detect(features, &map)?;
        let (probabilities, picks) = ensemble(&map, &detector)?;
        Ok(EnsembleDecision {
            map,
            detector,
            probabilities,
            picks,
        })
    }
}

/// Attack used when evaluating trained models.
pub enum EvalAttack<'a> {
    None,
    Gaussian,
    Fgsm { victim: &'a Classifier },
    Pgd {
        victim: &'a Classifier,
        steps: usize,
        step_frac: f64,
    },
    Apg(&'a Apg),
}

impl EvalAttack<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            EvalAttack::None => "none",
            EvalAttack::Gaussian => "gaussian",
            EvalAttack::Fgsm { .. } => "fgsm",
            EvalAttack::Pgd { .. } => "pgd",
            EvalAttack::Apg(_) => "apg",
        }
    }
}

/// Accuracy summary of one (attack, budget) evaluation cell.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub base_accuracy: Vec<f64>,
    pub ensemble_accuracy: f64,
    /// Fraction of samples whose detected level matches the budget's level.
    pub detector_accuracy: f64,
    /// Detector confusion counts, `confusion[true][predicted]`.
    pub detector_confusion: Vec<Vec<usize>>,
    /// Mean detector output per level.
    pub mean_detector: Vec<f64>,
    pub samples: usize,
}

/// Evaluates every base classifier and the ensemble on the first
/// `max_samples` of `data` under one attack at budget `eps` (0 = clean).
pub fn evaluate(
    stack: &EnsembleStack,
    data: &Dataset,
    attack: &EvalAttack<'_>,
    eps: f64,
    channel: &ChannelModel,
    max_samples: usize,
    rng: &mut impl Rng,
) -> Result<EvalSummary> {
    let n_models = stack.classifiers.len();
    let n_levels = stack.levels.count();
    let total = max_samples.min(data.len());
    let true_level = stack.levels.level_of(eps);

    let mut base_hits = vec![0usize; n_models];
    let mut ensemble_hits = 0usize;
    let mut detector_hits = 0usize;
    let mut confusion = vec![vec![0usize; n_levels]; n_levels];
    let mut mean_detector = vec![0.0; n_levels];

    const BATCH: usize = 128;
    let mut done = 0;
    while done < total {
        let take = BATCH.min(total - done);
        let idx: Vec<usize> = (done..done + take).collect();
        let (images, labels) = data.gather(&idx);
        let x = stack.encoder.encode(&images)?;

        let features = match attack {
            EvalAttack::None => {
                let (equalized, _) = receive(&x, None, channel, rng)?;
                stack.encoder.symbols_to_features(&equalized)?
            }
            EvalAttack::Gaussian => {
                let rows: Vec<Tensor> = (0..take)
                    .map(|_| gaussian_jamming(eps, stack.encoder.symbols, rng))
                    .collect::<rome_attacks::Result<_>>()?;
                let jam = Tensor::stack(&rows)?;
                let (equalized, _) = receive(&x, Some(&jam), channel, rng)?;
                stack.encoder.symbols_to_features(&equalized)?
            }
            EvalAttack::Apg(apg) => {
                let jam = apg.generate(&vec![eps; take], rng)?;
                let (equalized, _) = receive(&x, Some(&jam), channel, rng)?;
                stack.encoder.symbols_to_features(&equalized)?
            }
            EvalAttack::Fgsm { victim } => {
                let (equalized, _) = receive(&x, None, channel, rng)?;
                let clean = stack.encoder.symbols_to_features(&equalized)?;
                let delta = fgsm(victim, &clean, &labels, &vec![eps; take])?;
                add_rows(&clean, &delta)
            }
            EvalAttack::Pgd {
                victim,
                steps,
                step_frac,
            } => {
                let (equalized, _) = receive(&x, None, channel, rng)?;
                let clean = stack.encoder.symbols_to_features(&equalized)?;
                let delta = pgd(victim, &clean, &labels, &vec![eps; take], *steps, *step_frac)?;
                add_rows(&clean, &delta)
            }
        };

        let decision = stack.decide(&features)?;
        for bi in 0..take {
            for (m, hits) in base_hits.iter_mut().enumerate() {
                if argmax(decision.map.row(bi, m)) == labels[bi] {
                    *hits += 1;
                }
            }
            if decision.picks[bi] == labels[bi] {
                ensemble_hits += 1;
            }
            let detected = argmax(decision.detector.row(bi));
            confusion[true_level][detected] += 1;
            if detected == true_level {
                detector_hits += 1;
            }
            for (l, acc) in mean_detector.iter_mut().enumerate() {
                *acc += decision.detector.row(bi)[l];
            }
        }
        done += take;
    }

    let inv = 1.0 / total as f64;
    Ok(EvalSummary {
        base_accuracy: base_hits.iter().map(|&h| h as f64 * inv).collect(),
        ensemble_accuracy: ensemble_hits as f64 * inv,
        detector_accuracy: detector_hits as f64 * inv,
        detector_confusion: confusion,
        mean_detector: mean_detector.iter().map(|&v| v * inv).collect(),
        samples: total,
    })
}

fn add_rows(base: &Tensor, delta: &Tensor) -> Tensor {
    let mut out = base.clone();
    for (v, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *v += d;
    }
    out
}
