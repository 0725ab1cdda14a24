//! Staged workflow over a run directory: preprocess, describe, fit,
//! diagnose, poststratify and report. Every stage writes under
//! `<run>/<stage>/` and records its artifacts in `<run>/manifest.json`.

mod config;
mod manifest;
mod stages;

pub use config::{DiagnoseConfig, Inputs, PoststratConfig, PreprocessConfig, RunConfig};
pub use manifest::{sha256_file, Artifact, InputDigest, RunLock, RunManifest, StageRecord};
pub use stages::{
    model_dir_name, PreprocessOutput, PreprocessReport, Run, STAGES,
};

/// Version string stored in manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
