//! Self-contained numeric kernel: the MLP, its training loop, FedAvg, MNIST
//! loading and parameter/FLOP accounting.

mod data;
mod fedavg;
mod gemm;
mod model;
mod train;

use thiserror::Error;

pub use data::{load_idx, parse_idx_images, parse_idx_labels, partition, Dataset};
pub use fedavg::{accumulate, fedavg, normalize};
pub use model::{
    count_forward_flops, count_params, forward, mlp_init, Arch, Layer, ModelParams,
};
pub use train::{
    evaluate, loss_and_grad, softmax_cross_entropy, train_epochs, Hyperparams, Trained,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed model tensors: {0}")]
    Malformed(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u32, batch: usize },
    #[error("cannot aggregate an empty list of models")]
    EmptyAggregation,
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX file: {0}")]
    Truncated(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
