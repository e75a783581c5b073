//! Adversarial contrastive learning with a trainable negative bank, plus
//! FIFO-queue and in-batch baselines, at a scale that runs on one CPU core.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod negatives;
pub mod numerics;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
