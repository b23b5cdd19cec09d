//! Uncertainty-aware, map-constrained inertial localization.

pub mod cgan;
pub mod datasim;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod mapkit;
pub mod nn;
pub mod qnet;
pub mod textfmt;
pub mod trainer;

pub use error::{Error, Result};
