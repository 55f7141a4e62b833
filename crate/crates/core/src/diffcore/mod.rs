//! Small reverse-mode differentiation engine.
//!
//! Provides exactly the primitives needed by the flow, the toy classifiers
//! and the detectors, plus finite-difference verification.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_gradients, finite_difference_gradients, grad_check, FdGradients, GradCheckReport,
    DEVIATION_FLOOR,
};
pub use optim::{exponential_lr, Adam};
pub use params::{GradMap, ParamEntry, ParamSet};
pub use tape::{concat_cols, scatter_cols, Gradients, Tape, Var};
pub use tensor::Tensor;
