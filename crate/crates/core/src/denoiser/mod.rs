//! The noise-prediction backend contract.
//!
//! A [`Denoiser`] bundles the latent autoencoder, the material image encoder
//! and the conditional noise predictor. On request a prediction also returns
//! the guider inputs: the self-attention maps of a fixed, backend-declared
//! list of layers and the feature map of the last up-block. Backends must
//! provide the vector-Jacobian product of those internals w.r.t. the input
//! latent so guidance energies can be differentiated.

mod pretrained;
mod toy;

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::ImageRGB;
use crate::latent::LatentState;
use crate::mask::BinaryMask;

pub use pretrained::{load_pretrained_backend, WeightsLocator, WEIGHTS_ENV};
pub use toy::{make_toy_backend, ToyBackend};

/// Image-prompt tokens produced from the material exemplar.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialEmbedding {
    /// `tokens x dim`
    pub tokens: Array2<f64>,
}

/// Conditioning of one noise prediction.
#[derive(Debug, Clone)]
pub enum Conditioning {
    /// Empty prompt and no image tokens: the unconditional branch of CFG.
    Null,
    Text {
        prompt: String,
    },
    /// Text plus material tokens weighted by `lambda`, gated per query by
    /// `masks` (one mask per cross-attention resolution declared in the
    /// backend manifest, in the same order).
    TextImage {
        prompt: String,
        material: Arc<MaterialEmbedding>,
        lambda: f64,
        masks: Arc<Vec<BinaryMask>>,
    },
}

impl Conditioning {
    pub fn text(prompt: impl Into<String>) -> Self {
        Conditioning::Text { prompt: prompt.into() }
    }

    pub fn prompt(&self) -> &str {
        match self {
            Conditioning::Null => "",
            Conditioning::Text { prompt } | Conditioning::TextImage { prompt, .. } => prompt,
        }
    }
}

/// Guider inputs recorded during one prediction. The same type carries
/// cotangents for [`Denoiser::internals_vjp`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInternals {
    pub self_attn: Vec<ArrayD<f64>>,
    pub features: ArrayD<f64>,
}

impl DenoiserInternals {
    pub fn is_finite(&self) -> bool {
        self.self_attn.iter().flat_map(|a| a.iter()).chain(self.features.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct NoisePrediction {
    pub noise: Array3<f64>,
    pub internals: Option<DenoiserInternals>,
}

/// Reproducibility record of a backend, written next to every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendManifest {
    pub name: String,
    /// `[C, h, w]`
    pub latent_shape: [usize; 3],
    /// `[H, W]` of the pixel images the backend accepts.
    pub image_size: [usize; 2],
    pub attention_layers: Vec<String>,
    pub attention_shapes: Vec<Vec<usize>>,
    pub feature_shape: Vec<usize>,
    /// Resolutions of the image-prompt cross-attention layers; the object
    /// mask is max-pooled to each of these.
    pub cross_attention_levels: Vec<[usize; 2]>,
    pub embedding_tokens: usize,
    pub embedding_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl BackendManifest {
    pub fn cross_attention_levels(&self) -> Vec<(usize, usize)> {
        self.cross_attention_levels.iter().map(|l| (l[0], l[1])).collect()
    }
}

pub trait Denoiser: Send {
    fn manifest(&self) -> &BackendManifest;

    /// Image to clean latent (`t = 0`).
    fn encode(&self, image: &ImageRGB) -> Result<LatentState>;

    /// Latent to image, clamped into `[0, 1]`.
    fn decode(&self, z: &LatentState) -> Result<ImageRGB>;

    fn embed_material(&self, image: &ImageRGB) -> Result<MaterialEmbedding>;

    /// Noise prediction at native diffusion timestep `timestep`.
    fn predict_noise(
        &self,
        z: &LatentState,
        timestep: usize,
        cond: &Conditioning,
        record_internals: bool,
    ) -> Result<NoisePrediction>;

    /// `d/dz <cotangent, internals(z)>`: gradient of the inner product of
    /// `cotangent` with the recorded internals, w.r.t. the latent.
    fn internals_vjp(
        &self,
        z: &LatentState,
        timestep: usize,
        cond: &Conditioning,
        cotangent: &DenoiserInternals,
    ) -> Result<Array3<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn manifest(&self) -> &BackendManifest {
        (**self).manifest()
    }
    fn encode(&self, image: &ImageRGB) -> Result<LatentState> {
        (**self).encode(image)
    }
    fn decode(&self, z: &LatentState) -> Result<ImageRGB> {
        (**self).decode(z)
    }
    fn embed_material(&self, image: &ImageRGB) -> Result<MaterialEmbedding> {
        (**self).embed_material(image)
    }
    fn predict_noise(&self, z: &LatentState, timestep: usize, cond: &Conditioning, record: bool) -> Result<NoisePrediction> {
        (**self).predict_noise(z, timestep, cond, record)
    }
    fn internals_vjp(&self, z: &LatentState, timestep: usize, cond: &Conditioning, cot: &DenoiserInternals) -> Result<Array3<f64>> {
        (**self).internals_vjp(z, timestep, cond, cot)
    }
}

/// Which backend to construct.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Toy { seed: u64, height: usize, width: usize },
    Pretrained { locator: Option<String> },
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn Denoiser>> {
        match self {
            BackendSpec::Toy { seed, height, width } => Ok(Box::new(ToyBackend::new(*seed, *height, *width)?)),
            BackendSpec::Pretrained { locator } => load_pretrained_backend(locator.as_deref()),
        }
    }
}
