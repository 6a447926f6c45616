//! Experiment configuration: one JSON document drives a whole study.

use rome_channel::ChannelModel;
use rome_verifier::NormOrder;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyCase {
    /// Defenders know the attacker's generator and train against it.
    Ideal,
    /// Defenders train against a gradient agent; the attacker targets the
    /// standard classifier.
    General,
    /// The attacker trains against the full defender stack.
    Worst,
}

impl StudyCase {
    pub fn label(&self) -> &'static str {
        match self {
            StudyCase::Ideal => "ideal",
            StudyCase::General => "general",
            StudyCase::Worst => "worst",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        shape: Vec<usize>,
        margin: f64,
        train_count: usize,
        test_count: usize,
    },
    Mnist {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        #[serde(default)]
        limit: Option<usize>,
    },
    Cifar10 {
        train_batches: Vec<String>,
        test_batch: String,
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub scale: usize,
    pub power: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            scale: 8,
            power: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub batch: usize,
    pub lr: f64,
    pub epochs_joint: usize,
    pub epochs_at: usize,
    pub epochs_mpd: usize,
    pub epochs_apg: usize,
    /// Attacker-side learning rate (the generator ascends a weak signal
    /// and benefits from a hotter schedule than the defenders).
    pub lr_attacker: f64,
    pub pgd_steps: usize,
    pub pgd_step_frac: f64,
    /// Warm-start each ladder stage from its predecessor.
    pub chain_ladder: bool,
    /// Iterative-agent hardening budget for the detector itself
    /// (fraction of the lowest level boundary); none disables it.
    #[serde(default)]
    pub mpd_self_at_frac: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch: 128,
            lr: 1e-3,
            epochs_joint: 6,
            epochs_at: 3,
            epochs_mpd: 8,
            epochs_apg: 16,
            lr_attacker: 5e-3,
            pgd_steps: 10,
            pgd_step_frac: 0.25,
            chain_ladder: true,
            mpd_self_at_frac: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    /// Samples per evaluation cell.
    pub samples: usize,
    /// Samples per eye-diagram grid point.
    pub eye_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 500,
            eye_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifySection {
    pub norm: NormOrder,
    /// Tail probability for the noise-radius quantile.
    pub delta: f64,
    /// Monte-Carlo samples per verification row.
    pub mc_samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            norm: NormOrder::Two,
            delta: 1e-3,
            mc_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub channel: ChannelModel,
    /// Test grid in PSR dB, strictly increasing. The level boundaries span
    /// `[first, last]`.
    pub psr_grid_db: Vec<f64>,
    /// Number of power levels, including the no-attack level.
    pub levels: usize,
    pub case: StudyCase,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub verify: VerifySection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.psr_grid_db.len() < 2 || self.psr_grid_db.windows(2).any(|w| w[0] >= w[1]) {
            anyhow::bail!(
                "psr_grid_db must be strictly increasing with at least two points, got {:?}",
                self.psr_grid_db
            );
        }
        if self.levels < 2 {
            anyhow::bail!("need at least two levels (no-attack plus one attack level)");
        }
        if let DatasetSpec::Synthetic {
            classes,
            shape,
            margin,
            train_count,
            test_count,
        } = &self.dataset
        {
            if *classes < 2 || shape.len() != 3 || *margin <= 0.0 {
                anyhow::bail!("bad synthetic dataset spec");
            }
            if *train_count == 0 || *test_count == 0 {
                anyhow::bail!("empty dataset");
            }
        }
        Ok(())
    }

    /// Small synthetic configuration that trains in a few minutes on a CPU.
    pub fn toy(case: StudyCase, seed: u64) -> Self {
        Self {
            dataset: DatasetSpec::Synthetic {
                classes: 10,
                shape: vec![1, 8, 8],
                margin: 1.7,
                train_count: 2048,
                test_count: 512,
            },
            channel: ChannelModel::Awgn { snr_db: 20.0 },
            psr_grid_db: vec![-15.0, -13.0, -11.0, -9.0, -7.0, -5.0, -3.0, -1.0],
            levels: 4,
            case,
            seed,
            model: ModelSection::default(),
            train: TrainSection {
                batch: 32,
                lr: 2e-3,
                epochs_joint: 10,
                epochs_at: 4,
                epochs_mpd: 8,
                epochs_apg: 16,
                lr_attacker: 5e-3,
                pgd_steps: 10,
                pgd_step_frac: 0.25,
                chain_ladder: true,
                mpd_self_at_frac: None,
            },
            eval: EvalSection {
                samples: 400,
                eye_samples: 1000,
            },
            verify: VerifySection::default(),
        }
    }
}
