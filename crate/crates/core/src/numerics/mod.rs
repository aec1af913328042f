//! Dense linear algebra, parameter storage and reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod param;
pub mod rng;
mod scalar;
mod tape;

pub use gradcheck::{
    evaluate, grad_check, grad_check_params, relative_error, GradCheckReport, FD_EPSILON,
};
pub use matrix::{attention_normalize, matmul, row_softmax, Matrix};
pub use param::{ParamGrads, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};

pub(crate) use tape::log_sum_exp;
