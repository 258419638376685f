//! Domain generalization on rotated glyphs: episodic training of a
//! classifier generator that adapts to each unlabeled test sample, plus
//! reference baselines and the evaluation protocols around them.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod trainer;

pub use error::{Result, RunError};
