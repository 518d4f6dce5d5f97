//! Dense arrays, reverse-mode gradients, network layers, a 3×3 SVD and the
//! adaptive-moment optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kan;
mod layers;
mod optim;
mod store;
mod svd;
mod tensor;

pub use graph::{Graph, Var};
pub(crate) use graph::softmax_rows_value;
pub use kan::{kan_forward, KanLinear, SplineGrid};
pub use layers::{Linear, Mlp, MultiHeadAttention};
pub use optim::{optimizer_step, AdamConfig, CosineSchedule};
pub use store::ParameterStore;
pub use svd::{svd3, Svd3};
pub use tensor::Tensor;
