//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records each primitive as it executes; [`Tape::backward`]
//! replays the record in reverse. Gradient reversal and the straight-through
//! estimator are first-class primitives so their backward rules are explicit.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::huber_elem;
