//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward evaluation; parameters live outside it in a
//! [`ParamStore`] and enter the graph as leaves through [`Graph::param`].

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod suite;
mod tensor;

pub use gradcheck::{
    floored_relative_error, grad_check, grad_check_params, grad_check_where, relative_error, GradCheckReport, PARAM_CHECK_FLOOR,
};
pub use graph::{BnParams, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use params::{BnUpdate, ParamId, ParamKind, ParamStore, Parameter};
pub use suite::{primitive_suite, PrimitiveCheck, PROBE_EPS};
pub use tensor::Tensor;
pub(crate) use params::round_slice_to_f32;
