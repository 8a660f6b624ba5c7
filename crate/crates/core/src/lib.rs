//! Bayesian subspace inference over low-rank adapter parameters.
//!
//! A small tanh classifier carries frozen base weights and trainable LoRA
//! adapters. Adapters are fine-tuned with SGD, then iterates collected at a
//! constant learning rate feed SWA (the running mean) and SWAG (a Gaussian
//! with diagonal plus low-rank covariance). Ensembles of either give
//! MultiSWA and MultiSWAG. Deep ensembles and MC dropout are provided as
//! baselines, and [`metrics`] implements the calibration and OOD-detection
//! measures used to compare them.
//!
//! The [`harness`] module wires everything into a declarative experiment
//! that the `swag-lora` binary runs from a JSON config.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nnet;
pub mod optim;
pub mod rng;
pub mod swag;

pub use error::{Error, Result};
