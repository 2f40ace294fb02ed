//! Training feed-forward classifiers with a tunable sensitivity to
//! misclassification.
//!
//! The cross-entropy backward pass injects the prediction bias
//! ε = p − onehot(y) at the logits. [`pseudograd`] replaces ε with a
//! reshaped vector f_k(ε); k = 1 recovers cross-entropy exactly, k < 1
//! emphasizes examples that are nearly right and k > 1 those that are badly
//! wrong.

// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod network;
pub mod optim;
pub mod pseudograd;
pub mod report;
pub mod seed;
pub mod verify;

pub use error::{Error, Result};
pub use network::{Activation, InitScheme, Network, ParamSet};
pub use pseudograd::{Sensitivity, K_GRID};
