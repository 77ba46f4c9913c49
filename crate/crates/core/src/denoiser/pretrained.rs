//! Locating and loading pretrained latent-diffusion + image-prompt-adapter
//! weights.
//!
//! The weights directory follows the diffusers layout:
//!
//! ```text
//! <dir>/unet/diffusion_pytorch_model.safetensors
//! <dir>/vae/diffusion_pytorch_model.safetensors
//! <dir>/text_encoder/model.safetensors
//! <dir>/tokenizer/tokenizer.json
//! <dir>/image_encoder/model.safetensors
//! <dir>/ip_adapter/ip-adapter_sd15.safetensors
//! ```

use std::path::{Path, PathBuf};

use super::Denoiser;
use crate::error::{Error, Result};

/// Environment variable naming the weights directory.
pub const WEIGHTS_ENV: &str = "MATFUSE_WEIGHTS_DIR";

/// Resolved paths of every pretrained component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightsLocator {
    pub root: PathBuf,
    pub unet: PathBuf,
    pub vae: PathBuf,
    pub text_encoder: PathBuf,
    pub tokenizer: PathBuf,
    pub image_encoder: PathBuf,
    pub ip_adapter: PathBuf,
}

impl WeightsLocator {
    /// Resolves `locator`, falling back to `$MATFUSE_WEIGHTS_DIR`.
    pub fn resolve(locator: Option<&str>) -> Result<Self> {
        let root = match locator {
            Some(l) => PathBuf::from(l),
            None => std::env::var_os(WEIGHTS_ENV).map(PathBuf::from).ok_or_else(|| Error::BackendLoad {
                component: "pretrained weights".into(),
                reason: format!("no locator given and {WEIGHTS_ENV} is not set"),
            })?,
        };
        Self::in_dir(&root)
    }

    /// Checks that every component file exists under `root`.
    pub fn in_dir(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::BackendLoad {
                component: "pretrained weights".into(),
                reason: format!("{} is not a directory", root.display()),
            });
        }
        let need = |component: &str, rel: &str| -> Result<PathBuf> {
            let p = root.join(rel);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::BackendLoad {
                    component: component.into(),
                    reason: format!("missing {}", p.display()),
                })
            }
        };
        Ok(Self {
            root: root.to_path_buf(),
            unet: need("denoising unet", "unet/diffusion_pytorch_model.safetensors")?,
            vae: need("vae", "vae/diffusion_pytorch_model.safetensors")?,
            text_encoder: need("text encoder", "text_encoder/model.safetensors")?,
            tokenizer: need("tokenizer", "tokenizer/tokenizer.json")?,
            image_encoder: need("image encoder", "image_encoder/model.safetensors")?,
            ip_adapter: need("image-prompt adapter", "ip_adapter/ip-adapter_sd15.safetensors")?,
        })
    }
}

/// Loads the pretrained backend from `locator` (or `$MATFUSE_WEIGHTS_DIR`).
pub fn load_pretrained_backend(locator: Option<&str>) -> Result<Box<dyn Denoiser>> {
    let weights = WeightsLocator::resolve(locator)?;
    load(weights)
}

#[cfg(feature = "pretrained")]
fn load(weights: WeightsLocator) -> Result<Box<dyn Denoiser>> {
    Ok(Box::new(crate::sd::SdBackend::load(&weights, crate::sd::SdOptions::from_env())?))
}

#[cfg(not(feature = "pretrained"))]
fn load(_weights: WeightsLocator) -> Result<Box<dyn Denoiser>> {
    Err(Error::BackendLoad {
        component: "pretrained backend".into(),
        reason: "this build does not include the `pretrained` feature".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(root: &Path, rel: &str) {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, b"").unwrap();
    }

    #[test]
    fn missing_adapter_is_named() {
        let dir = tempfile::tempdir().unwrap();
        for rel in [
            "unet/diffusion_pytorch_model.safetensors",
            "vae/diffusion_pytorch_model.safetensors",
            "text_encoder/model.safetensors",
            "tokenizer/tokenizer.json",
            "image_encoder/model.safetensors",
        ] {
            touch(dir.path(), rel);
        }
        let err = load_pretrained_backend(Some(dir.path().to_str().unwrap())).err().unwrap();
        assert!(err.is_backend_load());
        assert!(err.to_string().starts_with("image-prompt adapter unavailable"), "{err}");
    }

    #[test]
    fn missing_directory_is_a_load_error() {
        let err = load_pretrained_backend(Some("/nonexistent/matfuse-weights")).err().unwrap();
        assert!(err.is_backend_load());
    }
}
