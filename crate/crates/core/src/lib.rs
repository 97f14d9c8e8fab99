//! Semi-supervised classification with a normalizing-flow consensus
//! classifier, built on a small reverse-mode autodiff engine.
//!
//! Layout:
//! - [`autodiff`]: tensors, tape, gradients, finite-difference checking.
//! - [`nn`]: MLP backbone, softmax head, cross-entropy, optimizers, EMA.
//! - [`flow`]: affine coupling flow with a Gaussian-mixture prior.
//! - [`normatch`]: pseudo-labels, consensus weighting, losses, train step.
//! - [`data`]: synthetic datasets, splits, augmentation, batching.
//! - [`harness`]: configs, experiments, metrics CSV, checkpoints.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod flow;
pub mod harness;
pub mod nn;
pub mod normatch;

pub use error::{Error, Result};
