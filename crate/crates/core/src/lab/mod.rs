//! Synthetic data, training, evaluation and verification tooling.

pub mod attention;
pub mod bench;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod synth;
pub mod train;
