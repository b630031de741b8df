//! Geometric autoencoder: a transformer autoencoder whose latent tokens are
//! constrained to a hypersphere shell by RMS normalization, trained with
//! dynamic noise injection and semantic distillation from a frozen vision
//! teacher, plus a compact rectified-flow stage and an evaluation harness
//! (linear probes, reconstruction metrics, Fréchet distance).

pub mod alignment;
pub mod autoencoder;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod latent;
pub mod losses;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod synth;
pub mod teacher;
pub mod train;

pub use error::{GaeError, Result};
