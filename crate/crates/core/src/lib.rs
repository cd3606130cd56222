//! Sparse autoencoders trained with adaptive temporal masking (ATM), the
//! TopK / JumpReLU / L1 baselines, and the evaluation suite used to compare
//! them on synthetic data with known hierarchical features.
//!
//! Pipeline: [`datagen`] builds a dataset, [`trainer`] fits an autoencoder
//! defined in [`sae`] (masking via [`atm`] for the ATM architecture), and
//! [`eval`] plus [`report`] produce the metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atm;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod optim;
pub mod real;
pub mod report;
pub mod rng;
pub mod sae;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
