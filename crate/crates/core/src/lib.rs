//! Prototype-guided dual-branch feature reconstruction for unsupervised
//! anomaly detection, built on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod error;
pub mod nn;
pub mod pnm;
pub mod prototype;
pub mod recon;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
