//! Dense `f64` tensors, a reverse-mode gradient tape, and a central-difference
//! gradient checker.
//!
//! ```
//! use sarcasm_tensor::{Tape, Tensor};
//!
//! let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
//! let mut tape = Tape::new();
//! let v = tape.param(&x);
//! let loss = tape.sum_squares(v).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(v).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod check;
mod error;
mod tape;
mod tensor;

pub use check::{
    finite_diff_check, relative_error, GradCheckError, GradCheckOptions, GradCheckReport,
    TensorCheck,
};
pub use error::{Result, TensorError};
pub use tape::{Activation, Gradients, PoolAxis, Tape, Var};
pub use tensor::Tensor;
