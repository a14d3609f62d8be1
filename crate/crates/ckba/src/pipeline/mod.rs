//! Experiment orchestration: configuration, persistence formats, run
//! manifests, and the CLI stages.

pub mod config;
pub mod iomatrix;
pub mod manifest;
pub mod stages;

pub use config::ExperimentConfig;
pub use iomatrix::{read_matrix, write_matrix};
pub use manifest::RunManifest;
pub use stages::{run_all, run_stage, Stage};
