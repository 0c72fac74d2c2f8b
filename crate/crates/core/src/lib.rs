pub mod dataset;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod evaluation;
pub mod metrics;
pub mod phantom;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
