//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every primitive application in execution order; each
//! [`Var`] is a handle to one recorded node. [`Tape::backward`] replays the
//! record in reverse from a scalar loss and accumulates gradients into the
//! leaves that require them.
//!
//! ```
//! use mmser::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum_all().unwrap();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod ops;
mod primitive;
mod tape;
mod tensor;

pub use gradcheck::{check_param_gradients, finite_difference_check, relative_error, Probe, ProbeReport, RELATIVE_ERROR_FLOOR};
pub use ops::{LAYER_NORM_EPS, LOG_FLOOR};
pub use primitive::{forward_primitive, forward_primitive_named, Attrs, PrimitiveKind};
pub use tape::{Axis, NodeId, Tape, Var};
pub use tensor::{precision, set_precision, with_precision, Precision, Tensor};
