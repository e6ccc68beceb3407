//! Minimal dense-tensor engine with define-by-run reverse-mode
//! differentiation, in `f64` throughout.
//!
//! ```
//! use stmixer_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let a = tape.var(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
//! let b = tape.var(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
//! let y = a.matmul(b).unwrap().sum_all();
//! assert_eq!(y.value().item(), 11.0);
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(a).data(), &[3.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use ops::{sigmoid, softplus, Conv3dGeometry, LAYERNORM_EPS};
pub use optim::{AdamWConfig, Parameter};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{numel, strides, Tensor};
