//! Dense `f64` tensors, a reverse-mode tape, Adam, finite-difference
//! gradient checking and the checkpoint container.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use gradcheck::{grad_check, relative_error, GradCheck, RELATIVE_ERROR_FLOOR};
pub use graph::{
    bce_logit, sigmoid, AttentionLayout, Fault, Graph, Var, ATTENTION_MASK_BIAS, LAYER_NORM_EPS,
};
pub use params::{fan_in_uniform, Binder, ParamSet};
pub use tensor::Tensor;
