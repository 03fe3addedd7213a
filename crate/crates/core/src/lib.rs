//! Luring-effect defense toolkit.
//!
//! Builds an augmented classifier `T = M ∘ P` where `P` is an input-to-input
//! mapper trained on top of a frozen target model `M`, attacks `T` with
//! transfer-oriented white-box and gradient-free attacks, and measures how
//! poorly the resulting adversarial examples transfer back to `M`.
//!
//! Modules follow the pipeline order: [`nn`] is the small CPU tensor/backprop
//! engine everything is built on, [`models`] defines the classifier / mapper /
//! augmented-model abstractions, [`train`] holds the luring loss and the four
//! mapper training procedures, [`attacks`] the attack suite, [`metrics`] the
//! transfer metrics and evaluation protocols, [`analysis`] the perturbation and
//! gradient analyses, [`toy`] the synthetic robust/non-robust feature
//! laboratory, and [`harness`] the config-driven experiment driver behind the
//! `luring` CLI.

pub mod analysis;
pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
