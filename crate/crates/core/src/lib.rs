//! Adversarial-example detection without adversarial training data.
//!
//! The pipeline estimates a multivariate Gaussian over the flattened noise of a
//! single seed attack, continuously perturbs it into a family of proximal
//! distributions, draws likelihood-filtered pseudo-noise from them, localizes
//! the noise with sparse saliency/edge masks, and trains a binary detector on
//! the forged samples. Generalization against unseen gradient attacks is then
//! measured by AUROC.

pub mod attack;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod forgery;
pub mod gaussian;
pub mod mask;
pub mod net;
pub mod noise;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
