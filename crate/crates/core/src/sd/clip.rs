//! CLIP text and vision transformers in the transformers layout.

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Module, Result, Tensor};
use candle_nn::VarBuilder;
use serde::Deserialize;
use serde_json::Value;

use super::nn::{attention_probs, merge_heads, split_heads, Conv2d, LayerNorm, Linear};
use crate::image::ImageRGB;

pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    QuickGelu,
    Gelu,
    GeluNew,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::QuickGelu => x.mul(&candle_nn::ops::sigmoid(&(x * 1.702)?)?),
            Activation::Gelu => x.gelu_erf(),
            Activation::GeluNew => x.gelu(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ClipConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_attention_heads: usize,
    pub num_hidden_layers: usize,
    pub hidden_act: Activation,
    #[serde(default = "ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "positions")]
    pub max_position_embeddings: usize,
    #[serde(default = "image_size")]
    pub image_size: usize,
    #[serde(default = "patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub projection_dim: usize,
}

fn ln_eps() -> f64 {
    1e-5
}
fn positions() -> usize {
    77
}
fn image_size() -> usize {
    224
}
fn patch() -> usize {
    14
}

impl ClipConfig {
    /// Text tower of ViT-L/14.
    pub fn text_l14() -> Self {
        Self {
            hidden_size: 768,
            intermediate_size: 3072,
            num_attention_heads: 12,
            num_hidden_layers: 12,
            hidden_act: Activation::QuickGelu,
            layer_norm_eps: 1e-5,
            vocab_size: 49408,
            max_position_embeddings: 77,
            image_size: 224,
            patch_size: 14,
            projection_dim: 768,
        }
    }

    /// Vision tower of ViT-H/14 with its 1024-d projection.
    pub fn vision_h14() -> Self {
        Self {
            hidden_size: 1280,
            intermediate_size: 5120,
            num_attention_heads: 16,
            num_hidden_layers: 32,
            hidden_act: Activation::Gelu,
            layer_norm_eps: 1e-5,
            vocab_size: 0,
            max_position_embeddings: 0,
            image_size: 224,
            patch_size: 14,
            projection_dim: 1024,
        }
    }

    /// Reads `config.json`; for a full two-tower config, `tower` selects
    /// `text_config` or `vision_config`.
    pub fn from_file(path: &Path, tower: &str) -> std::result::Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let root: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = match root.get(tower) {
            Some(sub) => sub.clone(),
            None => root.clone(),
        };
        if let (Some(p), Some(obj)) = (root.get("projection_dim"), cfg.as_object_mut()) {
            obj.entry("projection_dim").or_insert_with(|| p.clone());
        }
        serde_json::from_value(cfg).map_err(|e| format!("{}: {e}", path.display()))
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct Encoder {
    layers: Vec<EncoderLayer>,
    heads: usize,
    act: Activation,
}

impl Encoder {
    fn new(vb: VarBuilder, c: &ClipConfig) -> Result<Self> {
        let d = c.hidden_size;
        let layers = (0..c.num_hidden_layers)
            .map(|i| {
                let l = vb.pp(format!("layers.{i}"));
                Ok(EncoderLayer {
                    ln1: LayerNorm::new(l.pp("layer_norm1"), d, c.layer_norm_eps)?,
                    q: Linear::new(l.pp("self_attn.q_proj"), d, d, true)?,
                    k: Linear::new(l.pp("self_attn.k_proj"), d, d, true)?,
                    v: Linear::new(l.pp("self_attn.v_proj"), d, d, true)?,
                    out: Linear::new(l.pp("self_attn.out_proj"), d, d, true)?,
                    ln2: LayerNorm::new(l.pp("layer_norm2"), d, c.layer_norm_eps)?,
                    fc1: Linear::new(l.pp("mlp.fc1"), d, c.intermediate_size, true)?,
                    fc2: Linear::new(l.pp("mlp.fc2"), c.intermediate_size, d, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            heads: c.num_attention_heads,
            act: c.hidden_act,
        })
    }

    /// `mask` is added to the attention logits.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x.clone();
        for l in &self.layers {
            let h = l.ln1.forward(&x)?;
            let q = split_heads(&l.q.forward(&h)?, self.heads)?;
            let k = split_heads(&l.k.forward(&h)?, self.heads)?;
            let v = split_heads(&l.v.forward(&h)?, self.heads)?;
            let p = match mask {
                None => attention_probs(&q, &k)?,
                Some(m) => {
                    let d = q.dim(2)? as f64;
                    let logits = (q.matmul(&k.t()?.contiguous()?)? * d.powf(-0.5))?.broadcast_add(m)?;
                    super::nn::softmax_last(&logits)?
                }
            };
            x = (x + l.out.forward(&merge_heads(&p.matmul(&v)?, self.heads)?)?)?;
            let h = l.fc2.forward(&self.act.apply(&l.fc1.forward(&l.ln2.forward(&x)?)?)?)?;
            x = (x + h)?;
        }
        Ok(x)
    }
}

pub struct ClipText {
    token_embedding: Tensor,
    position_embedding: Tensor,
    encoder: Encoder,
    final_norm: LayerNorm,
    max_len: usize,
}

impl ClipText {
    /// `vb` is rooted at the model; keys may or may not carry a
    /// `text_model.` prefix.
    pub fn new(vb: VarBuilder, c: &ClipConfig) -> Result<Self> {
        let vb = if vb.contains_tensor("text_model.embeddings.token_embedding.weight") { vb.pp("text_model") } else { vb };
        Ok(Self {
            token_embedding: vb.get((c.vocab_size, c.hidden_size), "embeddings.token_embedding.weight")?,
            position_embedding: vb.get((c.max_position_embeddings, c.hidden_size), "embeddings.position_embedding.weight")?,
            encoder: Encoder::new(vb.pp("encoder"), c)?,
            final_norm: LayerNorm::new(vb.pp("final_layer_norm"), c.hidden_size, c.layer_norm_eps)?,
            max_len: c.max_position_embeddings,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Last hidden state `(1, n, d)` of token ids (causal attention).
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let n = ids.len();
        let dev = self.token_embedding.device();
        let idx = Tensor::from_vec(ids.to_vec(), n, dev)?;
        let x = self.token_embedding.index_select(&idx, 0)?;
        let x = (x + self.position_embedding.narrow(0, 0, n)?)?.unsqueeze(0)?;
        let mask: Vec<f32> = (0..n).flat_map(|i| (0..n).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 })).collect();
        let mask = Tensor::from_vec(mask, (n, n), dev)?.to_dtype(x.dtype())?;
        self.final_norm.forward(&self.encoder.forward(&x, Some(&mask))?)
    }
}

pub struct ClipVision {
    class_embedding: Tensor,
    patch_embedding: Conv2d,
    position_embedding: Tensor,
    pre_norm: LayerNorm,
    encoder: Encoder,
    post_norm: LayerNorm,
    projection: Option<Linear>,
    image_size: usize,
}

impl ClipVision {
    /// `vb` is rooted at the model (`vision_model.*`, `visual_projection.*`).
    pub fn new(vb: VarBuilder, c: &ClipConfig) -> Result<Self> {
        let v = vb.pp("vision_model");
        let d = c.hidden_size;
        let positions = (c.image_size / c.patch_size).pow(2) + 1;
        let projection = if c.projection_dim > 0 && vb.contains_tensor("visual_projection.weight") {
            Some(Linear::new(vb.pp("visual_projection"), d, c.projection_dim, false)?)
        } else {
            None
        };
        Ok(Self {
            class_embedding: v.get(d, "embeddings.class_embedding")?,
            patch_embedding: Conv2d::with_bias(v.pp("embeddings.patch_embedding"), 3, d, c.patch_size, c.patch_size, 0, false)?,
            position_embedding: v.get((positions, d), "embeddings.position_embedding.weight")?,
            pre_norm: LayerNorm::new(v.pp("pre_layrnorm"), d, c.layer_norm_eps)?,
            encoder: Encoder::new(v.pp("encoder"), c)?,
            post_norm: LayerNorm::new(v.pp("post_layernorm"), d, c.layer_norm_eps)?,
            projection,
            image_size: c.image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Pooled, projected embeddings `(b, p)` of preprocessed pixels.
    pub fn forward(&self, pixels: &Tensor) -> Result<Tensor> {
        let b = pixels.dim(0)?;
        let patches = self.patch_embedding.forward(pixels)?.flatten_from(2)?.transpose(1, 2)?;
        let d = self.class_embedding.dim(0)?;
        let cls = self.class_embedding.reshape((1, 1, d))?.expand((b, 1, d))?.to_dtype(patches.dtype())?;
        let x = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.position_embedding)?;
        let x = self.encoder.forward(&self.pre_norm.forward(&x)?, None)?;
        let pooled = self.post_norm.forward(&x.i((.., 0, ..))?)?;
        match &self.projection {
            Some(p) => p.forward(&pooled),
            None => Ok(pooled),
        }
    }
}

/// Resize-shortest-side, center-crop and normalize into `(1, 3, s, s)`.
pub fn preprocess(image: &ImageRGB, size: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let (h, w) = image.dims();
    let scale = size as f64 / h.min(w) as f64;
    let (nh, nw) = (((h as f64 * scale).round() as usize).max(size), ((w as f64 * scale).round() as usize).max(size));
    let resized = image::imageops::resize(&image.to_rgb8(), nw as u32, nh as u32, image::imageops::FilterType::CatmullRom);
    let (top, left) = ((nh - size) / 2, (nw - size) / 2);
    let mut data = vec![0f32; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = resized.get_pixel((left + x) as u32, (top + y) as u32).0[c] as f32 / 255.0;
                data[c * size * size + y * size + x] = (v - CLIP_MEAN[c]) / CLIP_STD[c];
            }
        }
    }
    Tensor::from_vec(data, (1, 3, size, size), dev)?.to_dtype(dtype)
}
