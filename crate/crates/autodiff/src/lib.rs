//! Dense `f64` tensors and a define-by-run tape for reverse-mode
//! differentiation.
//!
//! ```
//! use anomem_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, -2.0]));
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&x).data(), &[2.0, -4.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var, NORMALIZE_EPS};
pub use tensor::Tensor;
