//! Generative zero-shot learning at desk scale.
//!
//! The crate trains a conditional VAE-GAN feature generator jointly with a
//! feature-refinement network, synthesizes features for classes that have no
//! real training samples, and evaluates seen/unseen/harmonic-mean accuracy
//! under a per-class top-1 protocol. Everything runs on a small reverse-mode
//! autodiff engine whose gradients are graph nodes, so the critic's
//! gradient-norm penalty is itself trainable.

pub mod autodiff;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use tensor::{Precision, Tensor};
