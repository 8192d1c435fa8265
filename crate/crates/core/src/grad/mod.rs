//! Reverse-mode differentiation over small dense tensors.

mod graph;
mod multinomial;
mod params;
mod tensor;

pub use graph::{log_coefficients, Gradients, Graph, Var};
pub use multinomial::{log_factorial, log_multinomial_coefficient, multinomial_log_pmf};
pub use params::{Checkpoint, NamedTensor, ParameterStore};
pub use tensor::Tensor;
