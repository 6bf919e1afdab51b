//! Synthetic transfer-learning experiments on naive-Bayes generated data.
//!
//! The crate bundles a small reverse-mode autodiff engine, feed-forward
//! networks trained with momentum SGD, the naive-Bayes ground-truth model
//! and its log-odds perturbation, exact KL divergence, the transfer
//! algorithms (DANN, MCD, fine-tuning with layer freezing) and a
//! reproducible sweep harness.

pub mod autodiff;
mod error;

pub use error::{Error, Result};
pub mod bayesnet;
pub mod divergence;
pub mod harness;
pub mod nn;
pub mod plot;
pub mod seed;
pub mod transfer;
