//! Structured sparsity learning for small convolutional and fully-connected
//! networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense storage, im2col lowering, GEMM and CSR kernels.
//! - [`network`]: layers, forward/backward propagation and SGD training.
//! - [`ssl`]: group definitions, group-Lasso penalties and the regularized
//!   objective.
//! - [`compactor`]: zero-group detection, physical removal of structure,
//!   FLOP accounting and PCA rank analysis.
//! - [`bench`]: timing harness for dense, compacted-dense and CSR products.

pub mod bench;
pub mod compactor;
mod error;
pub mod network;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
