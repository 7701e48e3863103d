//! Dense `f64` tensors with a define-by-run tape for reverse-mode
//! differentiation.
//!
//! Every operation returns a new immutable [`Tensor`]. When any input requires
//! gradients (and recording is enabled, see [`no_grad`]) the result remembers
//! its inputs together with a gradient rule; [`Tensor::backward`] walks that
//! graph once in reverse topological order and accumulates into leaves.
//!
//! Checked mode (on by default, per thread) rejects non-finite results and
//! out-of-domain `log`/`sqrt` arguments. Training loops switch it off with
//! [`set_checked`].

mod error;
mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
mod shape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, gradients};
pub use ops::conv::Conv2dSpec;
pub use shape::{broadcast_shapes, split_at_axis};
pub use tensor::{is_checked, is_grad_enabled, no_grad, numel, set_checked, Graph, Tensor};
