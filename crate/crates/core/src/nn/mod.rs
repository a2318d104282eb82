//! Numerical core: tensors, a reverse-mode tape, layers and the optimiser.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use layers::{Adam, Binding, Conv, GradBuffer, Linear, LstmCell, Param, ParamId, ParamSet};
pub use tensor::Tensor;
