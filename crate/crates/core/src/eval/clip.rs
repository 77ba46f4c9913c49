//! CLIP image embeddings for crop similarity.
//!
//! Looks for `model.safetensors` (+ optional `config.json`) in, in order:
//! `$MATFUSE_CLIP_DIR`, `<weights>/clip/`, `<weights>/image_encoder/`.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, IndexOp};
use candle_nn::VarBuilder;

use super::ImageEmbedder;
use crate::denoiser::WEIGHTS_ENV;
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::sd::clip::preprocess;
use crate::sd::{ClipConfig, ClipVision};

pub const CLIP_DIR_ENV: &str = "MATFUSE_CLIP_DIR";

pub struct ClipEmbedder {
    model: ClipVision,
    device: Device,
    name: String,
}

fn unavailable(reason: impl Into<String>) -> Error {
    Error::BackendLoad {
        component: "CLIP image embedder".into(),
        reason: reason.into(),
    }
}

fn locate(weights_dir: Option<&Path>) -> Result<PathBuf> {
    if let Some(d) = std::env::var_os(CLIP_DIR_ENV) {
        return Ok(PathBuf::from(d));
    }
    let root = weights_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
        .ok_or_else(|| unavailable(format!("set {CLIP_DIR_ENV} or {WEIGHTS_ENV}, or pass a weights directory")))?;
    ["clip", "image_encoder"]
        .iter()
        .map(|sub| root.join(sub))
        .find(|d| d.join("model.safetensors").is_file())
        .ok_or_else(|| unavailable(format!("no clip/ or image_encoder/ model.safetensors under {}", root.display())))
}

impl ClipEmbedder {
    pub fn load(weights_dir: Option<&Path>) -> Result<Self> {
        Self::load_dir(&locate(weights_dir)?)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let model_path = dir.join("model.safetensors");
        if !model_path.is_file() {
            return Err(unavailable(format!("missing {}", model_path.display())));
        }
        let cfg_path = dir.join("config.json");
        let config = if cfg_path.is_file() {
            ClipConfig::from_file(&cfg_path, "vision_config").map_err(unavailable)?
        } else {
            ClipConfig::vision_h14()
        };
        let device = Device::Cpu;
        // SAFETY: the weight file is mapped read-only for the embedder's lifetime.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[&model_path], DType::F32, &device) }.map_err(|e| unavailable(e.to_string()))?;
        let model = ClipVision::new(vb, &config).map_err(|e| unavailable(e.to_string()))?;
        let name = format!(
            "clip-vision:{}:width={}:layers={}:patch={}:proj={}",
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            config.hidden_size,
            config.num_hidden_layers,
            config.patch_size,
            config.projection_dim
        );
        Ok(Self { model, device, name })
    }
}

impl ImageEmbedder for ClipEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, image: &ImageRGB) -> Result<Vec<f64>> {
        Ok(self.embed_batch(std::slice::from_ref(image))?.remove(0))
    }

    fn embed_batch(&self, images: &[ImageRGB]) -> Result<Vec<Vec<f64>>> {
        let err = |e: candle_core::Error| Error::Backend(e.to_string());
        let size = self.model.image_size();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let px = chunk.iter().map(|i| preprocess(i, size, DType::F32, &self.device)).collect::<candle_core::Result<Vec<_>>>().map_err(err)?;
            let batch = candle_core::Tensor::cat(&px, 0).map_err(err)?;
            let emb = self.model.forward(&batch).map_err(err)?;
            for i in 0..chunk.len() {
                let v = emb.i(i).and_then(|t| t.to_dtype(DType::F64)).and_then(|t| t.to_vec1::<f64>()).map_err(err)?;
                out.push(v);
            }
        }
        Ok(out)
    }
}
