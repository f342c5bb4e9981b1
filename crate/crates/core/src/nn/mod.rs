//! Minimal reverse-mode training stack: tensors, a small convolutional
//! encoder with a hand regression head, the contrastive and supervised
//! losses, Adam and checkpoints.

pub mod checkpoint;
pub mod contrastive;
pub mod graph;
pub mod model;
pub mod optim;
pub mod regression;
mod tensor;
pub mod train;


pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use contrastive::{
    batch_contrastive_loss, contrastive_forward_backward, cosine_sim, ntxent_loss,
    ContrastiveGroup,
};
pub use graph::{Gradients, Graph, Var};
pub use model::{ModelConfig, ModelParams};
pub use optim::{adam_step, lr_at, AdamState, TrainSchedule};
pub use regression::{
    decode_head, encode_head, finetune_loss, finetune_loss_with_grad, softplus, CameraDecoding,
    FineTuneLossWeights, FrameTarget, LossTerms, HEAD_DIM,
};
pub use tensor::Tensor;

use crate::hand::HandError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero-length vector in cosine similarity")]
    ZeroVector,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("graph not built: {0}")]
    GraphNotBuilt(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Hand(#[from] HandError),
}
