//! Reverse-mode differentiation over dense tensors and the layers used by
//! the registration and classification networks.

pub mod checkpoint;
mod conv;
mod dense;
pub mod gradcheck;
mod graph;
pub mod layers;
mod loss;
pub mod norm;
mod ops;
pub mod optim;
mod params;
mod pool;
mod spatial;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with, GradcheckReport};
pub use graph::{Backward, BackwardFn, Gradients, Graph, Var};
pub use layers::{BatchNorm, Conv3d, ForwardCtx, Linear};
pub use loss::softmax_rows;
pub use norm::{BatchStats, BnMode};
pub use optim::{onecycle_lr, Adam, TrainSchedule};
pub use params::{Buffer, BufferId, Param, ParamId, ParamStore};
pub use tensor::Tensor;
