//! Gradient-based training for deep feedforward networks.
//!
//! The crate is organised bottom-up: [`tensor`] and [`flowgraph`] provide
//! exact gradients, [`nn`] and [`autoencoder`] define models and training
//! criteria, [`optim`] and [`train`] run mini-batch SGD with early stopping,
//! [`pretrain`] stacks auto-encoders greedily, and [`hyperopt`] searches
//! hyper-parameter spaces.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoencoder;
pub mod dataio;
pub mod error;
pub mod flowgraph;
pub mod hyperopt;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
