//! Dense matrices and the autodiff tape used by the model and the losses.

mod graph;
mod mat;

pub use graph::{Grads, Graph, TensorError, Var};
pub use mat::Mat;
