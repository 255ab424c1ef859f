//! Dense tensors, neural primitives and reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{gelu_scalar, Gradients, Graph, Im2ColSpec, Var, LAYER_NORM_EPS, NORM_EPS};
pub use params::{manifest_path, ParamGrads, ParamStore};
pub use tensor::Tensor;
