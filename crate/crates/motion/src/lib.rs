//! Motion data layer: poses on a fixed 8-joint skeleton, action-labeled
//! sequences, a procedural gait/upper-body generator, feature
//! vectorization, and line-delimited JSON dataset files.

mod contact;
mod dataset;
mod pose;
mod quat;
mod synth;
mod vectorize;

pub use dataset::{load_dataset, save_dataset, DatasetSplit};
pub use pose::{
    heading_of, mean_frame_step, ActionLabel, GroundFrame, MotionSequence, Pose, Skeleton,
    ANKLE_JOINTS, JOINT_COUNT,
};
pub use quat::{mat3_to_rot6, rot6_to_mat3, UnitQuat};
pub use contact::stabilize_foot_contacts;
pub use synth::{
    gait_params, generate_gait, generate_target, left_foot_in_stance, leg_ik, GaitStart,
    GAIT_ACTIONS, TARGET_ACTIONS,
};
pub use vectorize::{pose_devectorize, pose_vectorize, NormStats, POSE_DIM};

#[derive(Debug, thiserror::Error)]
pub enum MotionError {
    #[error("unknown action index {index} for a {num_classes}-action set")]
    UnknownAction { index: usize, num_classes: usize },
    #[error("dataset has no training frames")]
    EmptyTrainSet,
    #[error("sequence '{id}' frame {frame}: quaternion norm {norm} outside 1e-9 of 1")]
    QuaternionNorm { id: String, frame: usize, norm: f64 },
    #[error("vector length {got}, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dataset file line {line}: {msg}")]
    BadFile { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
