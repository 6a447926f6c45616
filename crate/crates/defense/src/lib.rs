//! Receiver-side defense stack: power-level definitions, the adversarially
//! trained classifier ladder, the multi-level perturbation detector, and
//! detector-weighted model ensembling.

pub mod bundle;
pub mod levels;
pub mod mpd;
pub mod pipeline;
pub mod prediction;
pub mod training;

pub use bundle::{load_bundle, save_bundle};
pub use levels::PowerLevelSet;
pub use mpd::{build_mpd, Mpd, MpdConfig};
pub use pipeline::{evaluate, receive, EnsembleStack, EvalAttack, EvalSummary};
pub use prediction::{ensemble, lppg, PredictionMap};
pub use training::{
    acquire_base_classifiers, adversarial_train, prediction_map, train_joint, train_mpd,
    TrainAttack, TrainLog, TrainOpts,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("invalid power levels: {0}")]
    InvalidLevels(String),
    #[error("invalid prediction map: {0}")]
    InvalidPrediction(String),
    #[error("configuration error: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("bundle i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Nn(#[from] rome_nn::NnError),
    #[error(transparent)]
    Channel(#[from] rome_channel::ChannelError),
    #[error(transparent)]
    Model(#[from] rome_models::ModelError),
    #[error(transparent)]
    Attack(#[from] rome_attacks::AttackError),
}

pub type Result<T> = std::result::Result<T, DefenseError>;
