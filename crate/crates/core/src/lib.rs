//! Training and diagnosis of unstructured sparse neural networks.
//!
//! The crate is organised around a [`network::MaskedNetwork`]: a
//! feed-forward network whose weight tensors carry binary masks.
//! [`autodiff`] differentiates it (gradients and exact Hessian-vector
//! products), [`init`] provides dense and sparsity-aware initializations,
//! [`dst`] evolves connectivity during training (SET, RigL, gradual
//! magnitude pruning, lottery tickets), and [`flow`] and [`landscape`]
//! analyse gradient flow, Hessian spectra and the relationship between
//! solutions.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod dst;
pub mod error;
pub mod flow;
pub mod init;
pub mod landscape;
pub mod network;
pub mod rng;
pub mod schedule;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{build_network, Mask, MaskedNetwork, NetworkSpec};
pub use tensor::Tensor;
