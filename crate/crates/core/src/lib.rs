//! Decoder language models with swappable time-mixing blocks (softmax
//! attention, retention, selective SSM), cross-architecture weight transfer,
//! freeze scheduling and a small byte-level training harness.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod ops;
pub mod store;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod verify;

pub use autograd::{Gradients, Graph, ParamVars, Var};
pub use checkpoint::{diff_checkpoints, load_checkpoint, save_checkpoint, CheckpointMeta, DiffReport};
pub use error::{Error, Result};
pub use model::{ModelConfig, MixerKind, ResidualStyle, SsmConfig};
pub use store::ParameterStore;
pub use tensor::{DType, Scalar, Tensor};
pub use train::{train, ModelSource, Perplexity, RunSummary, TrainRunConfig, Trainer};
pub use transfer::{Component, ComponentSet, FreezeMask, FreezePolicy, TransferPlan};
