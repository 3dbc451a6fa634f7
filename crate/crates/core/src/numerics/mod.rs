//! Reverse-mode differentiation over a fixed primitive set, the AdamW
//! optimizer, and the warmup/cosine learning-rate schedule.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod schedule;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId, Primitive};
pub use optim::{AdamWConfig, AdamWState, GradBuffer, ParamGroup, ParamSet};
pub use schedule::LrSchedule;
pub use tensor::{Scalar, Tensor};
