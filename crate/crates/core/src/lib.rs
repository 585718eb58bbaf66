//! Paraphrase generation by Gaussian diffusion in the latent space of a
//! frozen sequence autoencoder, with an optional zero-initialised control
//! branch that steers generation from masked keyword segments.

pub mod codec;
pub mod controller;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod parallel;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
mod train_util;

pub use error::{Error, Result};
pub use train_util::{write_loss_csv, LossRecord};
