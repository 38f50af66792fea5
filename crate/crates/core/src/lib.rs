//! Text-conditioned motion generation with discrete diffusion over
//! vector-quantized motion tokens.
//!
//! The pipeline runs motion through [`motion_repr`] into pose features,
//! tokenizes them with the [`vq`] codebook, learns a conditional reverse
//! process ([`diffusion`], [`denoiser`]) on the tokens with text conditions
//! from [`hsa`], samples with classifier-free guidance ([`sampler`]) and
//! scores the result with [`metrics`]. [`corpus`] holds dataset manifests
//! and caption filtering.

pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod hsa;
pub mod io;
pub mod metrics;
pub mod motion_repr;
pub mod nn;
pub mod sampler;
pub mod synth;
pub mod vq;

pub use error::{Error, Result};
