//! Dense arrays and differentiable primitives.
//!
//! All arithmetic is double precision. Reverse-mode gradients and
//! forward-mode Jacobian-vector products are both driven by a recorded
//! [`Tape`].

mod array;
mod autodiff;
pub mod kernels;
mod params;
mod tape;

pub use array::Array;
pub use autodiff::{gradient, jvp, vjp, Linearization};
pub use params::{ParamSet, ARCHIVE_MAGIC};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
