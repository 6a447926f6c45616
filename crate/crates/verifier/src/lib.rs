//! Certified robustness by forward linear-bound propagation.
//!
//! Every supported node of a computation graph is bracketed by two affine
//! maps of the flattened network input; intermediate ReLU intervals come
//! from concretizing the running bounds over the input region, and the
//! output bounds concretize through the dual norm of the region's l_p ball.
//! Distortion bounds, the scalar robustness metric, and the ensemble-level
//! guarantees are all derived from the output-node maps.

pub mod bounds;
pub mod distortion;
pub mod ensemble;
pub mod propagate;
pub mod region;
pub mod relax;

pub use bounds::{compose_affine, concretize, LinearBoundMap};
pub use distortion::{
    distortion_bound, distortion_bound_max, distortion_from_map, distortion_max_from_map,
    robustness, robustness_from_map, DistortionReport,
};
pub use ensemble::{
    ensemble_bounds, ensemble_distortion, ensemble_map, EnsembleCase,
};
pub use propagate::propagate;
pub use region::{dual_exponent, InputRegion, NormOrder};
pub use relax::{relax_relu, NeuronRelaxation};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("unsupported op kind for bound propagation: {0}")]
    UnsupportedOp(String),
    #[error("invalid interval: lower {lower} > upper {upper}")]
    BadInterval { lower: f64, upper: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("graph must have exactly one input, found {0}")]
    InputCount(usize),
    #[error("detector output does not match the declared case: {0}")]
    CaseMismatch(String),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error(transparent)]
    Nn(#[from] rome_nn::NnError),
}

pub type Result<T> = std::result::Result<T, VerifierError>;
