//! Exemplar-based material transfer on latent diffusion models.

pub mod cli;
pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod image;
pub mod latent;
pub mod mask;
pub mod pipeline;
pub mod sampler;
#[cfg(feature = "pretrained")]
pub mod sd;
pub mod service;

pub use config::{make_config, TransferConfig};
pub use error::{Error, Result};
pub use image::ImageRGB;
pub use latent::{InversionTrajectory, LatentState, PromptSet};
pub use mask::{downsample_mask, BinaryMask, MaskResolution};
