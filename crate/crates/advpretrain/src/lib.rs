//! Adversarial robustness via self-supervised pretraining, at desk scale.
//!
//! This crate reproduces, end to end on a laptop-sized budget, the
//! finding that adversarial *pretraining* on pretext tasks (rotation
//! prediction, jigsaw puzzles, a simplified masked-patch task) buys
//! adversarial robustness cheaply: fine-tuning from a robust
//! self-supervised encoder matches or beats robustness trained from
//! scratch while converging in fewer epochs, and ensembling several
//! pretext tasks — or attacking them jointly with a gradient-diversity
//! regularizer — improves it further.
//!
//! Everything is built from scratch on a small reverse-mode autodiff
//! tape: the model zoo, the PGD attack engine (including the joint
//! multi-task attack with a log-det diversity term), the pretraining /
//! fine-tuning pipeline over the full scenario matrix, and the
//! evaluation suite (robust accuracy, transfer matrices, prediction
//! ensembles, an unforeseen-attack battery).
//!
//! Start with the runnable examples (`cargo run --example ...`); the
//! `advpretrain` binary exposes the same pipeline as subcommands.

pub mod attack;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
