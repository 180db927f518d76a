//! Pseudo-siamese two-stream convolutional network that decides whether a
//! SAR patch and an optical patch show the same ground location, together
//! with a synthetic patch-pool simulator, the training loop and the
//! evaluation protocol (threshold sweeps, confusion rates, key-point
//! matching).

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod patchpool;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{BatchNormState, Graph, NodeId, RunningStats};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use model::{ArchitectureSpec, Mode, Model, ModelError, ModelParams};
pub use patchpool::{GeneratorConfig, Label, PatchPair, PatchPool, PoolError};
pub use tensor::{Scalar, Tensor, TensorError};
pub use train::{TrainConfig, TrainError};
