//! SE-ADA: style-encoder adversarial domain adaptation for learning
//! domain-invariant low-dimensional representations of volumetric images,
//! with comparison baselines (plain autoencoder, noise, ComBat, adversarial
//! and multi-decoder variants) and the four-criterion evaluation protocol.

pub mod combat;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod nn;
pub mod phantom;
pub mod seeds;
pub mod trainer;

pub use error::{Result, SeadaError};
