//! Joint future RGB + depth forecasting for driving scenes.
//!
//! From a single observed frame the model rolls out a short future as paired
//! image and depth sequences: both modalities share one latent space, a
//! diffusion UNet evolves the image latent over time, and a multi-scale depth
//! head reads the UNet features and feeds geometry back through
//! zero-initialized convolutions. Everything runs on a small f64 tensor
//! engine with reverse-mode differentiation, and trains end-to-end on a
//! procedurally generated driving world with exact analytic depth.

pub mod codec;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mli;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pointcloud;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
