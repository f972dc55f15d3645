//! Two-stage prediction pipeline (diffusion target synthesis followed by
//! in-betweening), recursive rollout, frame export, run configuration,
//! and the `mfp` command-line surface.

mod cli;
mod config;
mod export;
mod pipeline;

pub use cli::run_cli;
pub use config::{Checkpoints, RunConfig, TrainingParams};
pub use export::{export_frames, ExportFormat};
pub use pipeline::{
    long_term_rollout, mix_seed, predict_samples, predict_two_stage, rollout_round_seed,
    sample_seed, LatentSource, PipelineModels, Prediction, PredictionRequest, Rollout, Segment,
    SegmentKind,
};

/// Flatten a sequence into a normalized [T, pose_dim] tensor.
pub fn seq_to_tensor(
    seq: &mfp_motion::MotionSequence,
    norm: &mfp_motion::NormStats,
) -> mfp_tensor::Tensor {
    let mut data = Vec::with_capacity(seq.len() * mfp_motion::POSE_DIM);
    for f in &seq.frames {
        data.extend(mfp_motion::pose_vectorize(f, Some(norm)));
    }
    mfp_tensor::Tensor::matrix(seq.len(), mfp_motion::POSE_DIM, data)
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] mfp_models::ModelError),
    #[error(transparent)]
    Motion(#[from] mfp_motion::MotionError),
    #[error(transparent)]
    Tensor(#[from] mfp_tensor::TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
