//! Model zoo for the two-stage motion prediction pipeline: shared
//! attention blocks, the action-conditioned in-betweening VAE, the motion
//! diffusion generator, the post-hoc diversity sampler, the action
//! classifier, and the evaluation metrics.

pub mod classifier;
pub mod diffusion;
pub mod gradsuite;
pub mod metrics;
pub mod nets;
pub mod sampler;
pub mod vae;

use mfp_motion::MotionError;
use mfp_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step}: {detail}")]
    NanLoss { step: u64, detail: String },
    #[error("in-betweening length {requested} not trained; available: {available:?}")]
    LengthMismatch {
        requested: usize,
        available: Vec<usize>,
    },
    #[error("label index {index} outside the model's {num_classes} classes")]
    LabelOutOfRange { index: usize, num_classes: usize },
    #[error("frozen decoder was modified during sampler training")]
    DecoderChanged,
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Binds model parameters into a graph either as trainable named leaves or
/// as frozen constants (gradients still flow through constants to other
/// nodes, they just never reach a store).
pub struct Binder<'a> {
    store: &'a mfp_tensor::ParamStore,
    trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn trainable(store: &'a mfp_tensor::ParamStore) -> Self {
        Binder {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a mfp_tensor::ParamStore) -> Self {
        Binder {
            store,
            trainable: false,
        }
    }

    pub fn bind(&self, g: &mut mfp_tensor::Graph, name: &str) -> mfp_tensor::ValueId {
        if self.trainable {
            g.param(self.store, name)
        } else {
            g.constant(self.store.get(name).clone())
        }
    }

    pub fn store(&self) -> &mfp_tensor::ParamStore {
        self.store
    }
}
