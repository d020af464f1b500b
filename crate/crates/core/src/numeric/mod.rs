//! Dense tensors and reverse-mode differentiation for the encoder and losses.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use functional::{bidirectional_kl, cross_entropy, layer_norm, masked_softmax};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
