//! Dense `f64` tensors with a dynamic reverse-mode tape.
//!
//! Values live on a [`Tape`]; operations record a node and return a [`Var`]
//! handle. [`Tape::backward`] walks the recording in reverse and leaves a
//! gradient on every node that depends on a [`Tape::var`] leaf. Leaves made
//! with [`Tape::constant`] never receive one.
//!
//! ```
//! use vit_som::ndgrad::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.var(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

mod backward;
pub mod check;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use tape::{Metric, Tape, Var};
pub use tensor::Tensor;
