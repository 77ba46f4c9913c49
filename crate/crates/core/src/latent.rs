use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of latent channels of the SD family.
pub const LATENT_CHANNELS: usize = 4;

/// A `C x h x w` latent at DDIM step index `t` (0 = clean, `T` = noisiest).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub data: Array3<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(data: Array3<f64>, t: usize) -> Self {
        Self { data, t }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// The DDIM inversion trajectory `z*_0 .. z*_T` of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrajectory {
    latents: Vec<LatentState>,
    pub y_src: String,
}

impl InversionTrajectory {
    /// Requires `latents[i].t == i` for every entry.
    pub fn new(latents: Vec<LatentState>, y_src: String) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::Invalid("trajectory has no latents".into()));
        }
        if let Some((i, _)) = latents.iter().enumerate().find(|(i, z)| z.t != *i) {
            return Err(Error::Invalid(format!("trajectory entry {i} has a mismatched timestep")));
        }
        let shape = latents[0].shape();
        if latents.iter().any(|z| z.shape() != shape) {
            return Err(Error::Shape("trajectory latents differ in shape".into()));
        }
        Ok(Self { latents, y_src })
    }

    /// `T`, the number of inversion steps.
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn at(&self, t: usize) -> &LatentState {
        &self.latents[t]
    }

    pub fn latents(&self) -> &[LatentState] {
        &self.latents
    }
}

/// Source, target and null prompts of one edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub y_src: String,
    pub y_trg: String,
    #[serde(default)]
    pub null_prompt: String,
}

impl PromptSet {
    pub fn new(y_src: impl Into<String>, y_trg: impl Into<String>) -> Result<Self> {
        let y_src = y_src.into();
        if y_src.trim().is_empty() {
            return Err(Error::Invalid("source prompt must not be empty".into()));
        }
        Ok(Self {
            y_src,
            y_trg: y_trg.into(),
            null_prompt: String::new(),
        })
    }
}
