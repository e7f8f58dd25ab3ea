//! Riemannian optimization for neural networks whose weights live on matrix
//! manifolds (Stiefel, symmetric positive definite), with a small dense tensor
//! library and reverse-mode autodiff underneath.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod manifold;
pub mod nn;
pub mod optim;
pub mod problems;
pub mod suites;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use manifold::ManifoldDescriptor;
pub use tensor::Tensor;
