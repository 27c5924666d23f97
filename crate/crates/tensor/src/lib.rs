//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! The [`Graph`] records every op applied to its [`Var`]s; `backward` replays
//! the tape in reverse. Learnable state lives in a [`ParamStore`], is bound to
//! a tape with [`Graph::param`], and is updated by [`sgd_step`] under an
//! [`LrSchedule`]. [`finite_diff_grad`] is the independent oracle used to
//! check every gradient.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
mod param;
mod scalar;
mod schedule;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Graph, Var};
pub use param::{sgd_step, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use schedule::LrSchedule;
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
