//! Replay-free class-incremental learning.
//!
//! A single multilayer network is shared by a sequence of tasks. Each task
//! trains on weights nobody owns yet, prunes back to its most important
//! weights and freezes them ([`masked`]). An autoencoder branch lets the
//! model pick, without a task label, the task whose frozen subset
//! reconstructs an input best ([`inference`]), and a classifier head then
//! decides among that task's classes.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the training precision.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inference;
pub mod masked;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use data::{Dataset, Partition, Scenario};
pub use error::{Error, Result, TensorError};
pub use inference::InferenceResult;
pub use masked::{MaskedLinear, Phase, Proportion, TaskId, TaskRegistry, FREE};
pub use metrics::{AccuracyMatrix, RunReport};
pub use model::{ForwardResult, HybridModel, ModelConfig, Variant};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;
pub use trainer::{PruneSchedule, TaskLog, TrainPlan};

/// Training precision.
pub type Real = f32;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model = HybridModel<Real>;
/// Shadow precision for finite-difference checks.
pub type Model64 = HybridModel<f64>;
