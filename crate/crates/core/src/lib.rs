//! Implicit-reward self-alignment laboratory.
//!
//! A synthetic grounded-captioning world with an engineered language-prior
//! bias, a log-linear captioning policy with exact gradients, and the full
//! self-alignment loop: implicit-reward scoring with rectified visual
//! guidance, extrema sifting of on-policy candidates, pair post-processing,
//! and a composite textual/visual/anchored preference objective trained over
//! iterative rounds with separate scoring and optimization references.

pub mod align;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod objective;
pub mod perturb;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod rundir;
pub mod sift;
pub mod world;

pub use error::{Error, Result};
