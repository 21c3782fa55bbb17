//! Trainable aligner for document photos: feature pyramid, hierarchical
//! flow decoders, recurrent refinement, reverse-mode gradients, training
//! loops and gradient checks.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{NetError, Result};
pub use graph::{Grads, Graph, Var};
pub use model::{Model, ModelConfig};
pub use params::ParamStore;
pub use real::Real;
pub use tensor::Tensor;
pub use train::{selfsup_finetune, train_supervised, Pair, Sample, SelfSupConfig, TrainConfig};
