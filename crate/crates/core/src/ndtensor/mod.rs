//! Dense tensors and a small reverse-mode autodiff tape.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{gradcheck, relative_error, GradcheckReport, ABS_FLOOR, FD_STEP};
pub use graph::{Gradients, Graph, Var, PROB_FLOOR};
pub use tensor::{peek_dtype, Float, Tensor, NDT_MAGIC};
