//! Text-conditioned joint RGB + elevation diffusion for 2.5D terrain.
//!
//! The crate covers the whole desk-scale pipeline: a procedural terrain
//! corpus, geospatial preprocessing, caption construction from a region
//! atlas, a latent codec, a joint two-head denoiser trained with a masked
//! v-prediction objective, and DDIM sampling with classifier-free guidance.

pub mod captioner;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod format;
pub mod geoprep;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod rng;
pub mod sampler;
pub mod schedules;
pub mod synthcorpus;
pub mod trainer;

pub use error::{Error, Result};
