//! A compact reverse-mode automatic differentiation engine over `f64` arrays.
//!
//! Build a [`Tape`], record leaves with [`Tape::var`] (differentiable) or
//! [`Tape::constant`], compose them through the operations on [`Var`], then
//! call [`Tape::backward`] on a scalar output.
//!
//! ```
//! use hfvae_autograd::Tape;
//! use ndarray::arr1;
//!
//! let tape = Tape::new();
//! let x = tape.var(arr1(&[1.0, 2.0]).into_dyn());
//! let y = (x * x).sum();
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[2.0, 4.0]);
//! ```

mod conv;
pub mod gradcheck;
mod ops;
pub mod optim;
pub mod params;
mod tape;

pub use conv::{conv_out_size, conv_transpose_out_size};
pub use optim::{Adam, AdamConfig};
pub use params::{BoundParams, ParamStore};
pub use tape::{Gradients, Tape, Tensor, Var};
