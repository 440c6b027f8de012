//! Layer-collaborative diffusion for text-guided, multi-layered composable
//! image synthesis at desk scale.

pub mod apps;
pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod export;
pub mod harness;
pub mod layerspace;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod textcond;

pub use error::{Error, Result};
