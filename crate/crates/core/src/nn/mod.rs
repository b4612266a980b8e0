//! Differentiable primitives: arrays, the autodiff tape, layers, the
//! optimizer and learning-rate schedule, and checkpoint I/O.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, silu, Gradients, Graph, Var};
pub use layers::{conv_output_len, dropout, Conv1d, Linear, LstmStack, SelfAttention};
pub use optim::{triangular_cyclic_lr, AdamW, AdamWConfig, CyclicLr};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
