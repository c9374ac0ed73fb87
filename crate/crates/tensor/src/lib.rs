//! Dense `f32` tensors, a tape-based reverse-mode autodiff graph, a
//! counter-based RNG, and a finite-difference gradient checker.
//!
//! ```
//! use dmlf_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod ops;
mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, ParamGradError};
pub use graph::{Graph, Var};
pub use ops::{sigmoid, Activation};
pub use rng::{derive_seed, splitmix64, Rng, RngState};
pub use tensor::{Mask, Tensor};
