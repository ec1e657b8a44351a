//! Latent assimilation of sparse observations into a learned reduced-order
//! model.
//!
//! A convolutional autoencoder ([`cae`]) compresses 2D concentration fields
//! into a small latent vector, an LSTM ([`surrogate`]) advances that vector
//! in time, and an optimal-interpolation Kalman filter ([`assimilate`])
//! corrects the forecast with encoded sensor observations. The same filter
//! run on the full grid provides the baseline.
//!
//! The synthetic ventilation scene in [`scene`] produces the data, [`dataset`]
//! splits and windows it, and [`harness`] drives experiments end to end.

pub mod assimilate;
pub mod cae;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod persist;
pub mod scene;
pub mod stats;
pub mod surrogate;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
