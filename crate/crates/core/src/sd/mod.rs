//! Pretrained latent-diffusion backend with an image-prompt adapter, on
//! candle.
//!
//! Device and precision come from `MATFUSE_DEVICE` (`cpu`, `cuda[:N]`,
//! `metal[:N]`) and `MATFUSE_DTYPE` (`f32`, `f16`, `bf16`, `f64`).

pub(crate) mod clip;
mod nn;
#[cfg(test)]
mod reference;
mod unet;
mod vae;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::VarBuilder;
use ndarray::{Array3, ArrayD, IxDyn};
use tokenizers::Tokenizer;

use crate::denoiser::{BackendManifest, Conditioning, Denoiser, DenoiserInternals, MaterialEmbedding, NoisePrediction, WeightsLocator};
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::latent::LatentState;

pub use clip::{ClipConfig, ClipVision};
pub use nn::RandomWeights;
pub use unet::{UNet, UNetConfig};
pub use vae::{Vae, VaeConfig};

pub const DEVICE_ENV: &str = "MATFUSE_DEVICE";
pub const DTYPE_ENV: &str = "MATFUSE_DTYPE";
pub const IMAGE_SIZE_ENV: &str = "MATFUSE_IMAGE_SIZE";

const BOS: &str = "<|startoftext|>";
const EOS: &str = "<|endoftext|>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdOptions {
    pub device: String,
    pub dtype: String,
    pub image_size: usize,
}

impl Default for SdOptions {
    fn default() -> Self {
        Self {
            device: "cpu".into(),
            dtype: "f32".into(),
            image_size: 512,
        }
    }
}

impl SdOptions {
    pub fn from_env() -> Self {
        let d = Self::default();
        Self {
            device: std::env::var(DEVICE_ENV).unwrap_or(d.device),
            dtype: std::env::var(DTYPE_ENV).unwrap_or(d.dtype),
            image_size: std::env::var(IMAGE_SIZE_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(d.image_size),
        }
    }

    pub fn device(&self) -> Result<Device> {
        let bad = |reason: String| Error::BackendLoad {
            component: "compute device".into(),
            reason,
        };
        let (kind, ordinal) = match self.device.split_once(':') {
            Some((k, n)) => (k, n.parse::<usize>().map_err(|_| bad(format!("bad device ordinal in `{}`", self.device)))?),
            None => (self.device.as_str(), 0),
        };
        match kind {
            "cpu" => Ok(Device::Cpu),
            "cuda" => Device::new_cuda(ordinal).map_err(|e| bad(e.to_string())),
            "metal" => Device::new_metal(ordinal).map_err(|e| bad(e.to_string())),
            other => Err(bad(format!("unknown device `{other}`"))),
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f16" => Ok(DType::F16),
            "bf16" => Ok(DType::BF16),
            "f64" => Ok(DType::F64),
            other => Err(Error::BackendLoad {
                component: "compute precision".into(),
                reason: format!("unknown dtype `{other}`"),
            }),
        }
    }
}

fn backend_err(e: candle_core::Error) -> Error {
    Error::Backend(e.to_string())
}

fn load_err(component: &str) -> impl Fn(candle_core::Error) -> Error + '_ {
    move |e| Error::BackendLoad {
        component: component.into(),
        reason: e.to_string(),
    }
}

/// Image-prompt projection: pooled image embedding to `tokens` tokens.
struct ImageProj {
    proj: nn::Linear,
    norm: nn::LayerNorm,
    tokens: usize,
    dim: usize,
}

impl ImageProj {
    fn new(vb: VarBuilder, embed_dim: usize, dim: usize, tokens: usize) -> candle_core::Result<Self> {
        Ok(Self {
            proj: nn::Linear::new(vb.pp("proj"), embed_dim, dim * tokens, true)?,
            norm: nn::LayerNorm::new(vb.pp("norm"), dim, 1e-5)?,
            tokens,
            dim,
        })
    }

    fn forward(&self, embeds: &Tensor) -> candle_core::Result<Tensor> {
        let b = embeds.dim(0)?;
        self.norm.forward(&self.proj.forward(embeds)?.reshape((b, self.tokens, self.dim))?)
    }
}

/// Model components before assembly.
pub struct SdParts<'a> {
    pub unet: VarBuilder<'a>,
    pub vae: VarBuilder<'a>,
    pub text: VarBuilder<'a>,
    pub vision: VarBuilder<'a>,
    /// Adapter file; its `image_proj.*` and `ip_adapter.*` prefixes are used.
    pub adapter: VarBuilder<'a>,
    pub unet_config: UNetConfig,
    pub vae_config: VaeConfig,
    pub text_config: ClipConfig,
    pub vision_config: ClipConfig,
    pub tokenizer: Tokenizer,
    pub image_size: usize,
    pub name: String,
}

pub struct SdBackend {
    device: Device,
    dtype: DType,
    unet: UNet,
    vae: Vae,
    text: clip::ClipText,
    vision: ClipVision,
    image_proj: ImageProj,
    tokenizer: Tokenizer,
    bos: u32,
    eos: u32,
    manifest: BackendManifest,
    levels: Vec<(usize, usize)>,
    text_cache: Mutex<HashMap<String, Tensor>>,
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path, component: &str, fallback: T) -> Result<T> {
    if !path.is_file() {
        return Ok(fallback);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::BackendLoad {
        component: component.into(),
        reason: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::BackendLoad {
        component: component.into(),
        reason: format!("{}: {e}", path.display()),
    })
}

fn mmap<'a>(path: &Path, component: &str, dtype: DType, dev: &Device) -> Result<VarBuilder<'a>> {
    // SAFETY: weight files are opened read-only and must not be modified
    // while the backend is alive.
    unsafe { VarBuilder::from_mmaped_safetensors(&[path], dtype, dev) }.map_err(load_err(component))
}

impl SdBackend {
    /// Loads every component under `weights`; errors name the component.
    pub fn load(weights: &WeightsLocator, opts: SdOptions) -> Result<Self> {
        let device = opts.device()?;
        let dtype = opts.dtype()?;
        let root = &weights.root;
        let unet_config = read_config(&root.join("unet/config.json"), "denoising unet", UNetConfig::sd15())?;
        let vae_config = read_config(&root.join("vae/config.json"), "vae", VaeConfig::sd15())?;
        let text_path = root.join("text_encoder/config.json");
        let text_config = if text_path.is_file() {
            ClipConfig::from_file(&text_path, "text_config").map_err(|reason| Error::BackendLoad {
                component: "text encoder".into(),
                reason,
            })?
        } else {
            ClipConfig::text_l14()
        };
        let vision_path = root.join("image_encoder/config.json");
        let vision_config = if vision_path.is_file() {
            ClipConfig::from_file(&vision_path, "vision_config").map_err(|reason| Error::BackendLoad {
                component: "image encoder".into(),
                reason,
            })?
        } else {
            ClipConfig::vision_h14()
        };
        let tokenizer = Tokenizer::from_file(&weights.tokenizer).map_err(|e| Error::BackendLoad {
            component: "tokenizer".into(),
            reason: e.to_string(),
        })?;
        let parts = SdParts {
            unet: mmap(&weights.unet, "denoising unet", dtype, &device)?,
            vae: mmap(&weights.vae, "vae", dtype, &device)?,
            text: mmap(&weights.text_encoder, "text encoder", dtype, &device)?,
            vision: mmap(&weights.image_encoder, "image encoder", dtype, &device)?,
            adapter: mmap(&weights.ip_adapter, "image-prompt adapter", dtype, &device)?,
            unet_config,
            vae_config,
            text_config,
            vision_config,
            tokenizer,
            image_size: opts.image_size,
            name: "sd15-image-prompt-adapter".into(),
        };
        let mut backend = Self::from_parts(parts, device, dtype)?;
        backend.manifest.weights = Some(root.clone());
        Ok(backend)
    }

    pub fn from_parts(p: SdParts, device: Device, dtype: DType) -> Result<Self> {
        let factor = p.vae_config.factor();
        if !p.image_size.is_multiple_of(factor << (p.unet_config.depth() - 1)) {
            return Err(Error::BackendLoad {
                component: "denoising unet".into(),
                reason: format!("image size {} does not divide through every level", p.image_size),
            });
        }
        let cross = p.unet_config.cross_attention_dim;
        let has_adapter = p.adapter.contains_tensor("image_proj.proj.weight");
        if !has_adapter {
            return Err(Error::BackendLoad {
                component: "image-prompt adapter".into(),
                reason: "image_proj.proj.weight not found".into(),
            });
        }
        let embed_dim = p.vision_config.projection_dim;
        let proj_out = p
            .adapter
            .get_unchecked("image_proj.proj.bias")
            .and_then(|b| b.dim(0))
            .unwrap_or(4 * cross);
        let tokens = proj_out / cross;
        let image_proj = ImageProj::new(p.adapter.pp("image_proj"), embed_dim, cross, tokens).map_err(load_err("image-prompt adapter"))?;
        let unet = UNet::new(p.unet, Some(p.adapter.pp("ip_adapter")), p.unet_config).map_err(|e| {
            let msg = e.to_string();
            let component = if msg.contains("ip_adapter") { "image-prompt adapter" } else { "denoising unet" };
            Error::BackendLoad {
                component: component.into(),
                reason: msg,
            }
        })?;
        let vae = Vae::new(p.vae, p.vae_config).map_err(load_err("vae"))?;
        let text = clip::ClipText::new(p.text, &p.text_config).map_err(load_err("text encoder"))?;
        let vision = ClipVision::new(p.vision, &p.vision_config).map_err(load_err("image encoder"))?;
        let token = |t: &str| {
            p.tokenizer.token_to_id(t).ok_or_else(|| Error::BackendLoad {
                component: "tokenizer".into(),
                reason: format!("no `{t}` token"),
            })
        };
        let (bos, eos) = (token(BOS)?, token(EOS)?);

        let side = p.image_size / factor;
        let latent = (side, side);
        let levels = unet.cross_attention_levels(latent);
        let ucfg = unet.config();
        let n = ucfg.depth();
        let attention_shapes = unet
            .self_attention_layers()
            .iter()
            .map(|name| {
                let block: usize = name.split('.').nth(1).and_then(|b| b.parse().ok()).unwrap_or(0);
                let lvl = n - 1 - block;
                let hw = (side >> lvl) * (side >> lvl);
                vec![hw, hw]
            })
            .collect();
        let manifest = BackendManifest {
            name: p.name,
            latent_shape: [ucfg.in_channels, side, side],
            image_size: [p.image_size, p.image_size],
            attention_layers: unet.self_attention_layers().to_vec(),
            attention_shapes,
            feature_shape: vec![ucfg.block_out_channels[0], side, side],
            cross_attention_levels: levels.iter().map(|&(h, w)| [h, w]).collect(),
            embedding_tokens: tokens,
            embedding_dim: cross,
            seed: None,
            weights: None,
        };
        Ok(Self {
            device,
            dtype,
            unet,
            vae,
            text,
            vision,
            image_proj,
            tokenizer: p.tokenizer,
            bos,
            eos,
            manifest,
            levels,
            text_cache: Mutex::new(HashMap::new()),
        })
    }

    fn text_embedding(&self, prompt: &str) -> Result<Tensor> {
        if let Some(t) = self.text_cache.lock().expect("text cache").get(prompt) {
            return Ok(t.clone());
        }
        let enc = self.tokenizer.encode(prompt, false).map_err(|e| Error::Backend(format!("tokenizing prompt: {e}")))?;
        let max = self.text.max_len();
        let mut ids = vec![self.bos];
        ids.extend(enc.get_ids().iter().copied().take(max - 2));
        ids.push(self.eos);
        ids.resize(max, self.eos);
        let emb = self.text.forward(&ids).map_err(backend_err)?;
        self.text_cache.lock().expect("text cache").insert(prompt.to_string(), emb.clone());
        Ok(emb)
    }

    fn latent_tensor(&self, z: &LatentState) -> Result<Tensor> {
        let (c, h, w) = z.shape();
        let [mc, mh, mw] = self.manifest.latent_shape;
        if (c, h, w) != (mc, mh, mw) {
            return Err(Error::Shape(format!("latent {:?} but backend expects {:?}", (c, h, w), (mc, mh, mw))));
        }
        let data: Vec<f64> = z.data.iter().copied().collect();
        Tensor::from_vec(data, (1, c, h, w), &self.device).and_then(|t| t.to_dtype(self.dtype)).map_err(backend_err)
    }

    fn gates(&self, masks: &[crate::mask::BinaryMask]) -> Result<HashMap<(usize, usize), Tensor>> {
        if masks.len() != self.levels.len() {
            return Err(Error::Shape(format!("{} level masks for {} cross-attention levels", masks.len(), self.levels.len())));
        }
        masks
            .iter()
            .zip(&self.levels)
            .map(|(m, &lvl)| {
                if m.dims() != lvl {
                    return Err(Error::Shape(format!("level mask {:?} for level {:?}", m.dims(), lvl)));
                }
                let v: Vec<f64> = m.values().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let t = Tensor::from_vec(v, (1, lvl.0 * lvl.1, 1), &self.device)
                    .and_then(|t| t.to_dtype(self.dtype))
                    .map_err(backend_err)?;
                Ok((lvl, t))
            })
            .collect()
    }

    fn run(&self, x: &Tensor, timestep: usize, cond: &Conditioning, rec: Option<&mut unet::Recording>) -> Result<Tensor> {
        let (text, image) = match cond {
            Conditioning::Null => (self.text_embedding("")?, None),
            Conditioning::Text { prompt } => (self.text_embedding(prompt)?, None),
            Conditioning::TextImage {
                prompt,
                material,
                lambda,
                masks,
            } => {
                let tokens = &material.tokens;
                if tokens.dim() != (self.manifest.embedding_tokens, self.manifest.embedding_dim) {
                    return Err(Error::Shape(format!("material tokens {:?}", tokens.dim())));
                }
                let t = Tensor::from_vec(tokens.iter().copied().collect::<Vec<f64>>(), (1, tokens.nrows(), tokens.ncols()), &self.device)
                    .and_then(|t| t.to_dtype(self.dtype))
                    .map_err(backend_err)?;
                (self.text_embedding(prompt)?, Some((t, *lambda, self.gates(masks)?)))
            }
        };
        let image_cond = image.as_ref().map(|(tokens, lambda, gates)| unet::ImageCond {
            tokens,
            lambda: *lambda,
            gates,
        });
        let cond = unet::UNetCond { text: &text, image: image_cond };
        self.unet.forward(x, timestep as f64, &cond, rec).map_err(backend_err)
    }

    fn internals(&self, rec: &unet::Recording) -> Result<DenoiserInternals> {
        let self_attn = self
            .unet
            .self_attention_layers()
            .iter()
            .map(|name| {
                let t = rec.maps.get(name).ok_or_else(|| Error::Backend(format!("layer {name} was not recorded")))?;
                to_array(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let features = rec.features.as_ref().ok_or_else(|| Error::Backend("features were not recorded".into()))?;
        let features = to_array(&features.squeeze(0).map_err(backend_err)?)?;
        Ok(DenoiserInternals { self_attn, features })
    }
}

fn to_array(t: &Tensor) -> Result<ArrayD<f64>> {
    let shape = t.dims().to_vec();
    let v = t.to_dtype(DType::F64).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1::<f64>()).map_err(backend_err)?;
    ArrayD::from_shape_vec(IxDyn(&shape), v).map_err(|e| Error::Shape(e.to_string()))
}

fn from_array(a: &ArrayD<f64>, dtype: DType, dev: &Device) -> Result<Tensor> {
    Tensor::from_vec(a.iter().copied().collect::<Vec<f64>>(), a.shape(), dev).and_then(|t| t.to_dtype(dtype)).map_err(backend_err)
}

impl Denoiser for SdBackend {
    fn manifest(&self) -> &BackendManifest {
        &self.manifest
    }

    fn encode(&self, image: &ImageRGB) -> Result<LatentState> {
        let [h, w] = self.manifest.image_size;
        if image.dims() != (h, w) {
            return Err(Error::Image(format!("image is {:?} but the backend takes {h}x{w}", image.dims())));
        }
        let px: Vec<f32> = image.pixels().permuted_axes([2, 0, 1]).iter().map(|v| v * 2.0 - 1.0).collect();
        let x = Tensor::from_vec(px, (1, 3, h, w), &self.device).and_then(|t| t.to_dtype(self.dtype)).map_err(backend_err)?;
        let z = self.vae.encode(&x).map_err(backend_err)?;
        let z = to_array(&z.squeeze(0).map_err(backend_err)?)?;
        let z = z.into_dimensionality::<ndarray::Ix3>().map_err(|e| Error::Shape(e.to_string()))?;
        Ok(LatentState::new(z, 0))
    }

    fn decode(&self, z: &LatentState) -> Result<ImageRGB> {
        let x = self.vae.decode(&self.latent_tensor(z)?).map_err(backend_err)?;
        let x = to_array(&x.squeeze(0).map_err(backend_err)?)?;
        let x = x.into_dimensionality::<ndarray::Ix3>().map_err(|e| Error::Shape(e.to_string()))?;
        let px = x.permuted_axes([1, 2, 0]).mapv(|v| ((v + 1.0) / 2.0) as f32);
        ImageRGB::from_clamped(px.as_standard_layout().to_owned())
    }

    fn embed_material(&self, image: &ImageRGB) -> Result<MaterialEmbedding> {
        let px = clip::preprocess(image, self.vision.image_size(), self.dtype, &self.device).map_err(backend_err)?;
        let embeds = self.vision.forward(&px).map_err(backend_err)?;
        let tokens = self.image_proj.forward(&embeds).and_then(|t| t.squeeze(0)).map_err(backend_err)?;
        let tokens = to_array(&tokens)?.into_dimensionality::<ndarray::Ix2>().map_err(|e| Error::Shape(e.to_string()))?;
        Ok(MaterialEmbedding { tokens })
    }

    fn predict_noise(&self, z: &LatentState, timestep: usize, cond: &Conditioning, record_internals: bool) -> Result<NoisePrediction> {
        let x = self.latent_tensor(z)?;
        let mut rec = unet::Recording::default();
        let eps = self.run(&x, timestep, cond, record_internals.then_some(&mut rec))?;
        let noise = to_array(&eps.squeeze(0).map_err(backend_err)?)?
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let internals = if record_internals { Some(self.internals(&rec)?) } else { None };
        Ok(NoisePrediction { noise, internals })
    }

    fn internals_vjp(&self, z: &LatentState, timestep: usize, cond: &Conditioning, cotangent: &DenoiserInternals) -> Result<Array3<f64>> {
        let var = Var::from_tensor(&self.latent_tensor(z)?).map_err(backend_err)?;
        let mut rec = unet::Recording::default();
        self.run(var.as_tensor(), timestep, cond, Some(&mut rec))?;
        let layers = self.unet.self_attention_layers();
        if cotangent.self_attn.len() != layers.len() {
            return Err(Error::Shape(format!("{} attention cotangents for {} layers", cotangent.self_attn.len(), layers.len())));
        }
        let mut total: Option<Tensor> = None;
        let mut add = |value: &Tensor, cot: &ArrayD<f64>| -> Result<()> {
            if value.dims() != cot.shape() {
                return Err(Error::Shape(format!("cotangent {:?} for internal {:?}", cot.shape(), value.dims())));
            }
            let c = from_array(cot, self.dtype, &self.device)?;
            let term = value.mul(&c).and_then(|t| t.sum_all()).map_err(backend_err)?;
            total = Some(match total.take() {
                Some(t) => (t + term).map_err(backend_err)?,
                None => term,
            });
            Ok(())
        };
        for (name, cot) in layers.iter().zip(&cotangent.self_attn) {
            let map = rec.maps.get(name).ok_or_else(|| Error::Backend(format!("layer {name} was not recorded")))?;
            add(map, cot)?;
        }
        let features = rec.features.as_ref().ok_or_else(|| Error::Backend("features were not recorded".into()))?;
        add(&features.squeeze(0).map_err(backend_err)?, &cotangent.features)?;
        let total = total.expect("feature term always present");
        let grads = total.backward().map_err(backend_err)?;
        let g = match grads.get(var.as_tensor()) {
            Some(g) => to_array(&g.squeeze(0).map_err(backend_err)?)?,
            None => ArrayD::zeros(IxDyn(&self.manifest.latent_shape)),
        };
        g.into_dimensionality::<ndarray::Ix3>().map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Parts of a tiny untrained configuration: 16x16 images, 8x8 latents.
pub fn tiny_random_parts<'a>(seed: u64, dtype: DType) -> Result<SdParts<'a>> {
    let vb = || VarBuilder::from_backend(Box::new(RandomWeights { seed }), dtype, Device::Cpu);
    Ok(SdParts {
        unet: vb(),
        vae: vb(),
        text: vb(),
        vision: vb(),
        adapter: vb(),
        unet_config: UNetConfig {
            block_out_channels: vec![16, 32],
            layers_per_block: 1,
            attention_head_dim: unet::HeadCount::One(2),
            cross_attention_dim: 16,
            norm_num_groups: 8,
            down_block_types: vec!["CrossAttnDownBlock2D".into(), "DownBlock2D".into()],
            ..UNetConfig::sd15()
        },
        vae_config: VaeConfig {
            block_out_channels: vec![8, 8],
            layers_per_block: 1,
            latent_channels: 4,
            norm_num_groups: 4,
            scaling_factor: 0.5,
        },
        text_config: ClipConfig {
            hidden_size: 16,
            intermediate_size: 32,
            num_attention_heads: 2,
            num_hidden_layers: 1,
            vocab_size: TINY_VOCAB.len(),
            max_position_embeddings: 8,
            ..ClipConfig::text_l14()
        },
        vision_config: ClipConfig {
            hidden_size: 16,
            intermediate_size: 32,
            num_attention_heads: 2,
            num_hidden_layers: 1,
            image_size: 16,
            patch_size: 8,
            projection_dim: 12,
            ..ClipConfig::vision_h14()
        },
        tokenizer: tiny_tokenizer()?,
        image_size: 16,
        name: format!("sd-tiny-random:seed={seed}"),
    })
}

/// An untrained backend built from [`tiny_random_parts`].
pub fn tiny_random_backend(seed: u64, dtype: DType) -> Result<SdBackend> {
    let mut b = SdBackend::from_parts(tiny_random_parts(seed, dtype)?, Device::Cpu, dtype)?;
    b.manifest.seed = Some(seed);
    Ok(b)
}

const TINY_VOCAB: [&str; 10] = [BOS, EOS, "[UNK]", "a", "vase", "golden", "marble", "wooden", "cup", "metal"];

fn tiny_tokenizer() -> Result<Tokenizer> {
    let vocab: serde_json::Map<String, serde_json::Value> = TINY_VOCAB.iter().enumerate().map(|(i, w)| (w.to_string(), i.into())).collect();
    let spec = serde_json::json!({
        "version": "1.0",
        "truncation": null,
        "padding": null,
        "added_tokens": [],
        "normalizer": null,
        "pre_tokenizer": {"type": "Whitespace"},
        "post_processor": null,
        "decoder": null,
        "model": {"type": "WordLevel", "vocab": vocab, "unk_token": "[UNK]"}
    });
    spec.to_string().parse::<Tokenizer>().map_err(|e| Error::BackendLoad {
        component: "tokenizer".into(),
        reason: e.to_string(),
    })
}
