//! A small from-scratch CNN: layers, explicit backpropagation, SGD with
//! momentum, training loop, checkpoints and the transfer-learning helpers
//! (freezing and head replacement).

mod checkpoint;
mod layer;
mod network;
mod optim;
mod tensor;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layer::{Layer, LayerKind, ParamGrad, Params};
pub use network::{mininet_layers, Cache, Gradients, Network};
pub use optim::{sgdm_step, TrainConfig};
pub use tensor::Tensor;
pub(crate) use train::argmax;
pub use train::{accuracy, cross_entropy, cross_entropy_grad, evaluate, predict_proba, train, Corpus, EpochStats, History};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("tensor shape {shape:?} does not hold {len} values")]
    TensorShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("layer {layer}: {message}")]
    ShapeMismatch { layer: usize, message: String },
    #[error("input shape {found:?}, expected {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("side input: {0}")]
    AuxMismatch(String),
    #[error("activation cache does not match the current network")]
    StaleCache,
    #[error("non-finite gradient in layer {layer} ({kind}); step aborted")]
    NonFiniteGradient { layer: usize, kind: &'static str },
    #[error("gradient set does not match the network: {0}")]
    GradientMismatch(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cannot replace head: {0}")]
    Splice(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
