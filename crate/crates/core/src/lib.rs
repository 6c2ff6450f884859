//! Budget-aware structured pruning of small residual CNNs.
//!
//! Convolution outputs carry Hard Concrete gates whose expected activation
//! volume is pushed under a budget by a moving barrier. After training the
//! gates are thresholded and the network is rewritten into a graph that only
//! computes surviving channels.

pub mod autodiff;
pub mod budget;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gates;
pub mod gradcheck;
pub mod kernels;
pub mod netgraph;
pub mod optim;
pub mod persist;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tensor};
