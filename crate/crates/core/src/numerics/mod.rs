//! Dense arrays, a tape-based reverse-mode differentiator, masked
//! cross-entropy, AdamW and the warmup/decay learning-rate schedule.

mod graph;
mod kernels;
mod optim;
mod scalar;
mod schedule;
mod tensor;

pub use graph::{Grads, Graph, Reduction, Var};
pub use kernels::{cross_entropy, CrossEntropy};
pub use optim::{clip_global_norm, AdamW, OptimState};
pub use scalar::Scalar;
pub use schedule::Schedule;
pub use tensor::Tensor;
