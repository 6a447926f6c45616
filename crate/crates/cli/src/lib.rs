//! Experiment driver library: configuration, dataset ingestion, the
//! case-study pipeline, and report serialization. The `rome` binary is a
//! thin CLI over these functions.

pub mod config;
pub mod data;
pub mod eye;
pub mod metrics;
pub mod study;

pub use config::{DatasetSpec, ExperimentConfig, StudyCase};
pub use data::{load_cifar10, load_mnist_idx, nearest_centroid_accuracy, synth_dataset};
pub use eye::{default_eye_grid, eye_diagram, verify_assumption_properties, EyeAttack};
pub use metrics::{verify_csv, EyeTable, MetricRow, MetricTable, VerifyRow};
pub use study::{
    build_datasets, metric_table, run_case_study, stage_seed, train_stack, verification_rows,
    StudyArtifacts,
};
