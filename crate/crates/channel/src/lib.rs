//! Wireless channel simulation for symbol streams.
//!
//! Complex symbol vectors are carried as real tensors of interleaved
//! `(re, im)` pairs: a stream of `k` symbols is a tensor of `2k` reals.
//! All randomness goes through caller-supplied RNGs, so channel draws are
//! reproducible and safe to parallelize with independent streams.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rome_nn::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("signal and jamming lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-norm input cannot be power normalized")]
    ZeroNorm,
    #[error("channel gain magnitude {0} is below the equalization threshold")]
    DegenerateChannel(f64),
    #[error("negative noise variance {0}")]
    NegativeVariance(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Fading law plus operating SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelModel {
    Awgn { snr_db: f64 },
    Rayleigh { snr_db: f64 },
    Rician { snr_db: f64, k_factor: f64 },
}

impl ChannelModel {
    pub fn snr_db(&self) -> f64 {
        match self {
            ChannelModel::Awgn { snr_db }
            | ChannelModel::Rayleigh { snr_db }
            | ChannelModel::Rician { snr_db, .. } => *snr_db,
        }
    }

    /// Noise variance for unit per-symbol signal power.
    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db() / 10.0)
    }
}

/// One block-fading realization: legitimate gain, jamming gain, and the
/// complex noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDraw {
    pub h: Complex64,
    pub h_jam: Complex64,
    pub noise_var: f64,
}

impl ChannelDraw {
    /// Noiseless identity channel, handy in tests.
    pub fn clean() -> Self {
        Self {
            h: Complex64::new(1.0, 0.0),
            h_jam: Complex64::new(1.0, 0.0),
            noise_var: 0.0,
        }
    }
}

fn sample_unit_fading(model: &ChannelModel, rng: &mut impl Rng) -> Complex64 {
    let half = Normal::new(0.0, (0.5f64).sqrt()).expect("valid std");
    match model {
        ChannelModel::Awgn { .. } => Complex64::new(1.0, 0.0),
        ChannelModel::Rayleigh { .. } => Complex64::new(half.sample(rng), half.sample(rng)),
        ChannelModel::Rician { k_factor, .. } => {
            let los = (k_factor / (k_factor + 1.0)).sqrt();
            let scatter = (1.0 / (k_factor + 1.0)).sqrt();
            let diffuse = Complex64::new(half.sample(rng), half.sample(rng));
            Complex64::new(los, 0.0) + scatter * diffuse
        }
    }
}

/// Draws one block-fading realization. The legitimate and jamming channels
/// are independent draws from the same law; AWGN pins both gains to 1.
pub fn draw_channel(model: &ChannelModel, rng: &mut impl Rng) -> ChannelDraw {
    ChannelDraw {
        h: sample_unit_fading(model, rng),
        h_jam: sample_unit_fading(model, rng),
        noise_var: model.noise_variance(),
    }
}

/// Scales `x` so that its squared l2 norm equals `k * power` exactly.
pub fn power_normalize(x: &Tensor, k: usize, power: f64) -> Result<Tensor> {
    if k == 0 || power <= 0.0 {
        return Err(ChannelError::InvalidParameter(
            "symbol count and power must be positive".into(),
        ));
    }
    let norm = x.l2_norm();
    if norm == 0.0 {
        return Err(ChannelError::ZeroNorm);
    }
    Ok(x.scale((k as f64 * power).sqrt() / norm))
}

/// Samples complex white Gaussian noise CN(0, var I_k) as 2k reals.
pub fn sample_noise(symbols: usize, var: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if var < 0.0 {
        return Err(ChannelError::NegativeVariance(var));
    }
    if var == 0.0 {
        return Ok(Tensor::zeros(&[2 * symbols]));
    }
    let per_component = Normal::new(0.0, (var / 2.0).sqrt())
        .map_err(|_| ChannelError::NegativeVariance(var))?;
    Ok(Tensor::from_vec(
        (0..2 * symbols).map(|_| per_component.sample(rng)).collect(),
    ))
}

/// Multiplies an interleaved complex vector by a complex scalar.
pub fn complex_scale(x: &Tensor, c: Complex64) -> Tensor {
    let mut out = x.clone();
    let data = out.data_mut();
    for pair in data.chunks_exact_mut(2) {
        let v = Complex64::new(pair[0], pair[1]) * c;
        pair[0] = v.re;
        pair[1] = v.im;
    }
    out
}

/// Adjoint of [`complex_scale`] for real gradients: multiply by conj(c).
pub fn complex_scale_adjoint(grad: &Tensor, c: Complex64) -> Tensor {
    complex_scale(grad, c.conj())
}

/// Channel with explicit noise: `h x + h_jam dx + noise`. Deterministic,
/// used by both the RNG wrapper and the identity tests.
pub fn transmit_with_noise(
    x: &Tensor,
    jamming: Option<&Tensor>,
    draw: &ChannelDraw,
    noise: &Tensor,
) -> Result<Tensor> {
    if let Some(dx) = jamming {
        if dx.len() != x.len() {
            return Err(ChannelError::LengthMismatch(x.len(), dx.len()));
        }
    }
    if noise.len() != x.len() {
        return Err(ChannelError::LengthMismatch(x.len(), noise.len()));
    }
    let mut out = complex_scale(x, draw.h);
    if let Some(dx) = jamming {
        let jam = complex_scale(dx, draw.h_jam);
        out.add_assign(&jam).expect("length checked");
    }
    out.add_assign(noise).expect("length checked");
    Ok(out)
}

/// Received symbols `h x + h_jam dx + n`, with `n ~ CN(0, noise_var I)`.
/// Without jamming this is the plain fading/AWGN channel.
pub fn transmit(
    x: &Tensor,
    jamming: Option<&Tensor>,
    draw: &ChannelDraw,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let noise = sample_noise(x.len() / 2, draw.noise_var, rng)?;
    transmit_with_noise(x, jamming, draw, &noise)
}

const EQUALIZE_FLOOR: f64 = 1e-12;

/// Per-symbol division by the (perfectly known) channel gain.
pub fn equalize(received: &Tensor, h: Complex64) -> Result<Tensor> {
    if h.norm() < EQUALIZE_FLOOR {
        return Err(ChannelError::DegenerateChannel(h.norm()));
    }
    Ok(complex_scale(received, h.inv()))
}

/// Jamming power constraint from a perturbation-to-signal ratio in dB:
/// `eps = sqrt(P * 10^(psr/10))`.
pub fn psr_to_epsilon(psr_db: f64, power: f64) -> f64 {
    (power * 10f64.powf(psr_db / 10.0)).sqrt()
}

/// Inverse of [`psr_to_epsilon`].
pub fn epsilon_to_psr(epsilon: f64, power: f64) -> f64 {
    10.0 * (epsilon * epsilon / power).log10()
}

/// Empirical (1 - delta) quantile of the noise norm `||n||_2` over Monte
/// Carlo draws of CN(0, var I_k). At least 1e5 draws are used.
pub fn noise_radius(var: f64, symbols: usize, delta: f64, rng: &mut impl Rng) -> Result<f64> {
    if var < 0.0 {
        return Err(ChannelError::NegativeVariance(var));
    }
    if !(0.0..=0.5).contains(&delta) || delta == 0.0 {
        return Err(ChannelError::InvalidParameter(format!(
            "tail probability {delta} outside (0, 0.5]"
        )));
    }
    if var == 0.0 {
        return Ok(0.0);
    }
    const DRAWS: usize = 100_000;
    let per_component = Normal::new(0.0, (var / 2.0).sqrt()).expect("var > 0");
    let mut norms: Vec<f64> = (0..DRAWS)
        .map(|_| {
            (0..2 * symbols)
                .map(|_| {
                    let v: f64 = per_component.sample(rng);
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    norms.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
    let idx = (((1.0 - delta) * DRAWS as f64).ceil() as usize).clamp(1, DRAWS) - 1;
    Ok(norms[idx])
}
