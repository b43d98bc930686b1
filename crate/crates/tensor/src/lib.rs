//! Dense tensors with define-by-run reverse-mode automatic differentiation.
//!
//! ```
//! use hipa_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.watch(&Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod element;
mod error;
pub mod gradcheck;
mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use ops::activation::Activation;
pub use ops::conv::{conv2d, Conv2dOptions};
pub use ops::elementwise::{broadcast_shape, BinaryOp};
pub use ops::norm::{layer_norm, LAYER_NORM_EPS};
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
