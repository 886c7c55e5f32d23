//! Instruction-conditioned latent diffusion for low-light image enhancement.

pub mod codec;
pub mod config;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod instruct;
pub mod ipfm;
pub mod metrics;
pub mod numcore;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod service;

pub use error::{Error, Result};
