//! Differentiable computation over a closed primitive set, parameter
//! ownership, and a finite-difference gradient oracle.

mod check;
mod graph;
mod optim;
mod params;

pub use check::{finite_diff_check, finite_diff_check_structured, relative_error, CheckConfig, GradReport, ParamReport, REL_ERR_FLOOR};
pub use graph::{backprop, leaf_gradient, log_sigmoid, log_sum_exp, sigmoid, softmax_into, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{init_uniform, Param, ParamId, ParamSet};
pub(crate) use params::hex;
