//! Semi-supervised classification with multi-head pseudo-label weighting.
//!
//! The crate trains a small shared-backbone MLP with several classifier heads
//! on synthetic Gaussian tasks, weighting each head's pseudo-labels by the
//! agreement and confidence of the other heads. Baselines (supervised only,
//! fixed-threshold, self-adaptive threshold, plain co-training and an
//! APM-threshold variant) share the same loop so they can be compared on
//! equal footing.

pub mod abc;
pub mod apm;
pub mod config;
pub mod datagen;
pub mod error;
pub mod freematch;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod plwm;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
pub use numkit::{RealMatrix, SeededRng};
pub use trainer::{Algorithm, TrainConfig, Trainer};
