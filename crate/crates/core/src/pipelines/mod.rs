//! Experiment orchestration behind the command-line verbs. Every command
//! reads one [`ExperimentConfig`], writes its artifacts under
//! `<output_dir>/<name>/`, and shares trained models through
//! `<output_dir>/models/<key>/`.

mod commands;
mod config;
mod context;

pub use commands::{
    cmd_cluster_analysis, cmd_embed, cmd_noise_sweep, cmd_pipeline, cmd_select_descriptors, cmd_size_matched,
    cmd_subset_sweep, cmd_train_qsar, cmd_train_vae, cmd_variance_study, evaluate_embedding, ClusterAnalysisResult,
    ClusterRun, CvSummary, NoisePoint, NoiseSweepResult, PipelineResult, PipelineRun, Report, Stat,
    SubsetSweepResult, SweepRow, TrainQsarResult, TrainVaeResult, VarianceResult,
};
pub use config::{
    ExperimentConfig, Preset, QsarEntry, SelectionConfig, SelectionMode, SourceConfig, TargetConfig, VaeSection,
    Variant,
};
pub use context::{load_target, obtain_model, run_predictor_selection, run_selection, Context, InputDigest, ModelRequest, TrainedModel};

use std::path::PathBuf;

use thiserror::Error;

use crate::chem_data::DataError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("input data error: {0}")]
    Data(#[from] DataError),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl PipelineError {
    /// 1 for experiment failures, 2 for config and I/O problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Stage { .. } => 1,
            _ => 2,
        }
    }
}
