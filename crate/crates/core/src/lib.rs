//! Cross-attention masked autoencoder pretraining for time series, with the
//! downstream tuning schemes built on its frozen weights: fine-tuning, direct
//! forecasting, linear probing, mask-token tuning and prompt-token tuning.
//!
//! Everything runs on a small f64 tensor engine with reverse-mode autodiff
//! ([`tensor`]), so results are bit-reproducible for a fixed seed.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod masking;
pub mod model;
pub mod optim;
pub mod params;
pub mod series;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
