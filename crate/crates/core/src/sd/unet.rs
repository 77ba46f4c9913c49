//! Conditional UNet in the diffusers layout, with image-prompt
//! cross-attention and optional recording of self-attention maps and the
//! last up-block features.

use std::collections::HashMap;

use candle_core::{DType, Module, Result, Tensor, D};
use candle_nn::VarBuilder;
use serde::Deserialize;

use super::nn::{attention_probs, merge_heads, silu, split_heads, Conv2d, GroupNorm, LayerNorm, Linear};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum HeadCount {
    One(usize),
    PerBlock(Vec<usize>),
}

impl HeadCount {
    fn get(&self, block: usize) -> usize {
        match self {
            HeadCount::One(h) => *h,
            HeadCount::PerBlock(v) => v[block.min(v.len() - 1)],
        }
    }
}

/// The subset of a diffusers `unet/config.json` this network reads.
#[derive(Debug, Clone, Deserialize)]
pub struct UNetConfig {
    #[serde(default = "four")]
    pub in_channels: usize,
    #[serde(default = "four")]
    pub out_channels: usize,
    pub block_out_channels: Vec<usize>,
    #[serde(default = "two")]
    pub layers_per_block: usize,
    pub attention_head_dim: HeadCount,
    pub cross_attention_dim: usize,
    #[serde(default = "groups")]
    pub norm_num_groups: usize,
    #[serde(default = "eps")]
    pub norm_eps: f64,
    pub down_block_types: Vec<String>,
    #[serde(default)]
    pub use_linear_projection: bool,
    #[serde(default)]
    pub freq_shift: f64,
    #[serde(default = "yes")]
    pub flip_sin_to_cos: bool,
}

fn four() -> usize {
    4
}
fn two() -> usize {
    2
}
fn groups() -> usize {
    32
}
fn eps() -> f64 {
    1e-5
}
fn yes() -> bool {
    true
}

impl UNetConfig {
    pub fn sd15() -> Self {
        Self {
            in_channels: 4,
            out_channels: 4,
            block_out_channels: vec![320, 640, 1280, 1280],
            layers_per_block: 2,
            attention_head_dim: HeadCount::One(8),
            cross_attention_dim: 768,
            norm_num_groups: 32,
            norm_eps: 1e-5,
            down_block_types: ["CrossAttnDownBlock2D", "CrossAttnDownBlock2D", "CrossAttnDownBlock2D", "DownBlock2D"]
                .map(String::from)
                .to_vec(),
            use_linear_projection: false,
            freq_shift: 0.0,
            flip_sin_to_cos: true,
        }
    }

    fn cross_attn(&self, block: usize) -> bool {
        self.down_block_types[block].contains("CrossAttn")
    }

    /// Number of resolution levels.
    pub fn depth(&self) -> usize {
        self.block_out_channels.len()
    }
}

/// Image tokens and per-resolution query gates of the image-prompt branch.
pub struct ImageCond<'a> {
    pub tokens: &'a Tensor,
    pub lambda: f64,
    /// `(h, w)` of a feature level to a `(1, h*w, 1)` gate.
    pub gates: &'a HashMap<(usize, usize), Tensor>,
}

pub struct UNetCond<'a> {
    pub text: &'a Tensor,
    pub image: Option<ImageCond<'a>>,
}

/// Internals captured during one forward pass.
#[derive(Default)]
pub struct Recording {
    /// Recorded layer name to head-averaged self-attention probabilities.
    pub maps: HashMap<String, Tensor>,
    pub features: Option<Tensor>,
}

pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_emb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(vb: VarBuilder, in_ch: usize, out_ch: usize, temb: Option<usize>, groups: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(vb.pp("norm1"), groups, in_ch, eps)?,
            conv1: Conv2d::new(vb.pp("conv1"), in_ch, out_ch, 3, 1, 1)?,
            time_emb_proj: temb.map(|d| Linear::new(vb.pp("time_emb_proj"), d, out_ch, true)).transpose()?,
            norm2: GroupNorm::new(vb.pp("norm2"), groups, out_ch, eps)?,
            conv2: Conv2d::new(vb.pp("conv2"), out_ch, out_ch, 3, 1, 1)?,
            shortcut: (in_ch != out_ch).then(|| Conv2d::new(vb.pp("conv_shortcut"), in_ch, out_ch, 1, 1, 0)).transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let (Some(proj), Some(t)) = (&self.time_emb_proj, temb) {
            let t = proj.forward(&silu(t)?)?;
            h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl Attention {
    fn new(vb: VarBuilder, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(vb.pp("to_q"), dim, dim, false)?,
            to_k: Linear::new(vb.pp("to_k"), ctx_dim, dim, false)?,
            to_v: Linear::new(vb.pp("to_v"), ctx_dim, dim, false)?,
            to_out: Linear::new(vb.pp("to_out.0"), dim, dim, true)?,
            heads,
        })
    }

    fn attend(&self, q: &Tensor, ctx: &Tensor, to_k: &Linear, to_v: &Linear) -> Result<(Tensor, Tensor)> {
        let k = split_heads(&to_k.forward(ctx)?, self.heads)?;
        let v = split_heads(&to_v.forward(ctx)?, self.heads)?;
        let p = attention_probs(q, &k)?;
        let out = merge_heads(&p.matmul(&v)?, self.heads)?;
        Ok((out, p))
    }
}

/// Image-prompt key/value projections of one cross-attention layer.
struct IpProjection {
    to_k: Linear,
    to_v: Linear,
}

struct TransformerBlock {
    name: String,
    norm1: LayerNorm,
    attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    ip: Option<IpProjection>,
    norm3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    fn forward(&self, x: &Tensor, hw: (usize, usize), cond: &UNetCond, rec: Option<&mut Recording>, record: &[String]) -> Result<Tensor> {
        // self-attention
        let h = self.norm1.forward(x)?;
        let q = split_heads(&self.attn1.to_q.forward(&h)?, self.attn1.heads)?;
        let (a, p) = self.attn1.attend(&q, &h, &self.attn1.to_k, &self.attn1.to_v)?;
        let attn1_name = format!("{}.attn1", self.name);
        if let Some(rec) = rec {
            if record.contains(&attn1_name) {
                rec.maps.insert(attn1_name, p.mean(0)?);
            }
        }
        let x = (x + self.attn1.to_out.forward(&a)?)?;

        // decoupled cross-attention: text term plus gated image term
        let h = self.norm2.forward(&x)?;
        let q = split_heads(&self.attn2.to_q.forward(&h)?, self.attn2.heads)?;
        let (mut a, _) = self.attn2.attend(&q, cond.text, &self.attn2.to_k, &self.attn2.to_v)?;
        if let (Some(img), Some(ip)) = (&cond.image, &self.ip) {
            if img.lambda != 0.0 {
                let gate = img
                    .gates
                    .get(&hw)
                    .ok_or_else(|| candle_core::Error::Msg(format!("no image-prompt mask for level {hw:?}")))?;
                let (ai, _) = self.attn2.attend(&q, img.tokens, &ip.to_k, &ip.to_v)?;
                a = (a + (ai.broadcast_mul(gate)? * img.lambda)?)?;
            }
        }
        let x = (x + self.attn2.to_out.forward(&a)?)?;

        let h = self.ff_in.forward(&self.norm3.forward(&x)?)?;
        let parts = h.chunk(2, D::Minus1)?;
        let h = parts[0].mul(&parts[1].gelu_erf()?)?;
        x + self.ff_out.forward(&h)?
    }
}

enum Proj {
    Conv(Conv2d),
    Linear(Linear),
}

struct Transformer2D {
    norm: GroupNorm,
    proj_in: Proj,
    block: TransformerBlock,
    proj_out: Proj,
}

struct AttnSpec<'a> {
    heads: usize,
    ctx_dim: usize,
    groups: usize,
    linear: bool,
    ip: Option<VarBuilder<'a>>,
}

impl Transformer2D {
    fn new(vb: VarBuilder, name: String, ch: usize, spec: &AttnSpec) -> Result<Self> {
        let proj = |n: &str| -> Result<Proj> {
            Ok(if spec.linear {
                Proj::Linear(Linear::new(vb.pp(n), ch, ch, true)?)
            } else {
                Proj::Conv(Conv2d::new(vb.pp(n), ch, ch, 1, 1, 0)?)
            })
        };
        let tb = vb.pp("transformer_blocks.0");
        let ip = match &spec.ip {
            Some(ipvb) => Some(IpProjection {
                to_k: Linear::new(ipvb.pp("to_k_ip"), spec.ctx_dim, ch, false)?,
                to_v: Linear::new(ipvb.pp("to_v_ip"), spec.ctx_dim, ch, false)?,
            }),
            None => None,
        };
        Ok(Self {
            norm: GroupNorm::new(vb.pp("norm"), spec.groups, ch, 1e-6)?,
            proj_in: proj("proj_in")?,
            block: TransformerBlock {
                name: format!("{name}.transformer_blocks.0"),
                norm1: LayerNorm::new(tb.pp("norm1"), ch, 1e-5)?,
                attn1: Attention::new(tb.pp("attn1"), ch, ch, spec.heads)?,
                norm2: LayerNorm::new(tb.pp("norm2"), ch, 1e-5)?,
                attn2: Attention::new(tb.pp("attn2"), ch, spec.ctx_dim, spec.heads)?,
                ip,
                norm3: LayerNorm::new(tb.pp("norm3"), ch, 1e-5)?,
                ff_in: Linear::new(tb.pp("ff.net.0.proj"), ch, ch * 8, true)?,
                ff_out: Linear::new(tb.pp("ff.net.2"), ch * 4, ch, true)?,
            },
            proj_out: proj("proj_out")?,
        })
    }

    fn forward(&self, x: &Tensor, cond: &UNetCond, rec: Option<&mut Recording>, record: &[String]) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = self.norm.forward(x)?;
        let tokens = |t: Tensor| -> Result<Tensor> { t.reshape((b, c, h * w))?.transpose(1, 2) };
        let seq = match &self.proj_in {
            Proj::Conv(conv) => tokens(conv.forward(&n)?)?,
            Proj::Linear(l) => l.forward(&tokens(n)?)?,
        };
        let seq = self.block.forward(&seq, (h, w), cond, rec, record)?;
        let out = match &self.proj_out {
            Proj::Conv(conv) => conv.forward(&seq.transpose(1, 2)?.reshape((b, c, h, w))?)?,
            Proj::Linear(l) => l.forward(&seq)?.transpose(1, 2)?.reshape((b, c, h, w))?,
        };
        out + x
    }
}

struct Layer {
    resnet: ResBlock,
    attn: Option<Transformer2D>,
}

struct Block {
    layers: Vec<Layer>,
    resample: Option<Conv2d>,
}

pub struct UNet {
    config: UNetConfig,
    conv_in: Conv2d,
    time_1: Linear,
    time_2: Linear,
    down: Vec<Block>,
    mid_res0: ResBlock,
    mid_attn: Transformer2D,
    mid_res1: ResBlock,
    up: Vec<Block>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    self_attention_layers: Vec<String>,
}

impl UNet {
    /// `ip` holds the adapter's `ip_adapter.*` weights.
    pub fn new(vb: VarBuilder, ip: Option<VarBuilder>, config: UNetConfig) -> Result<Self> {
        let c = &config;
        let n = c.depth();
        let ch = &c.block_out_channels;
        let temb_dim = ch[0] * 4;
        let (g, eps) = (c.norm_num_groups, c.norm_eps);
        let down_attn_count: usize = (0..n).filter(|&i| c.cross_attn(i)).count() * c.layers_per_block;
        let up_attn_count: usize = (0..n).filter(|&i| c.cross_attn(n - 1 - i)).count() * (c.layers_per_block + 1);
        let mut ordinal = 0usize;
        let next_ip = |ordinal: &mut usize| -> Option<VarBuilder> {
            let idx = 2 * *ordinal + 1;
            *ordinal += 1;
            ip.as_ref().map(|v| v.pp(format!("{idx}")))
        };
        fn spec<'a>(c: &UNetConfig, block: usize, ip: Option<VarBuilder<'a>>) -> AttnSpec<'a> {
            AttnSpec {
                heads: c.attention_head_dim.get(block),
                ctx_dim: c.cross_attention_dim,
                groups: c.norm_num_groups,
                linear: c.use_linear_projection,
                ip,
            }
        }

        let mut skips = vec![ch[0]];
        let mut down = Vec::with_capacity(n);
        let mut prev = ch[0];
        for i in 0..n {
            let bvb = vb.pp(format!("down_blocks.{i}"));
            let mut layers = Vec::new();
            for j in 0..c.layers_per_block {
                let resnet = ResBlock::new(bvb.pp(format!("resnets.{j}")), prev, ch[i], Some(temb_dim), g, eps)?;
                let attn = if c.cross_attn(i) {
                    let name = format!("down_blocks.{i}.attentions.{j}");
                    Some(Transformer2D::new(bvb.pp(format!("attentions.{j}")), name, ch[i], &spec(c, i, next_ip(&mut ordinal)))?)
                } else {
                    None
                };
                prev = ch[i];
                skips.push(prev);
                layers.push(Layer { resnet, attn });
            }
            let resample = if i + 1 < n {
                skips.push(prev);
                Some(Conv2d::new(bvb.pp("downsamplers.0.conv"), prev, prev, 3, 2, 1)?)
            } else {
                None
            };
            down.push(Block { layers, resample });
        }
        debug_assert_eq!(ordinal, down_attn_count);

        ordinal = down_attn_count + up_attn_count;
        let mid_ip = next_ip(&mut ordinal);
        let mvb = vb.pp("mid_block");
        let mid_res0 = ResBlock::new(mvb.pp("resnets.0"), prev, prev, Some(temb_dim), g, eps)?;
        let mid_attn = Transformer2D::new(mvb.pp("attentions.0"), "mid_block.attentions.0".into(), prev, &spec(c, n - 1, mid_ip))?;
        let mid_res1 = ResBlock::new(mvb.pp("resnets.1"), prev, prev, Some(temb_dim), g, eps)?;

        ordinal = down_attn_count;
        let mut up = Vec::with_capacity(n);
        for i in 0..n {
            let down_idx = n - 1 - i;
            let out_ch = ch[down_idx];
            let bvb = vb.pp(format!("up_blocks.{i}"));
            let mut layers = Vec::new();
            for j in 0..=c.layers_per_block {
                let skip = skips.pop().expect("skip channel per up layer");
                let resnet = ResBlock::new(bvb.pp(format!("resnets.{j}")), prev + skip, out_ch, Some(temb_dim), g, eps)?;
                let attn = if c.cross_attn(down_idx) {
                    let name = format!("up_blocks.{i}.attentions.{j}");
                    Some(Transformer2D::new(bvb.pp(format!("attentions.{j}")), name, out_ch, &spec(c, down_idx, next_ip(&mut ordinal)))?)
                } else {
                    None
                };
                prev = out_ch;
                layers.push(Layer { resnet, attn });
            }
            let resample = if i + 1 < n { Some(Conv2d::new(bvb.pp("upsamplers.0.conv"), prev, prev, 3, 1, 1)?) } else { None };
            up.push(Block { layers, resample });
        }

        let self_attention_layers = default_self_attention_layers(c);
        Ok(Self {
            conv_in: Conv2d::new(vb.pp("conv_in"), c.in_channels, ch[0], 3, 1, 1)?,
            time_1: Linear::new(vb.pp("time_embedding.linear_1"), ch[0], temb_dim, true)?,
            time_2: Linear::new(vb.pp("time_embedding.linear_2"), temb_dim, temb_dim, true)?,
            down,
            mid_res0,
            mid_attn,
            mid_res1,
            up,
            norm_out: GroupNorm::new(vb.pp("conv_norm_out"), g, ch[0], eps)?,
            conv_out: Conv2d::new(vb.pp("conv_out"), ch[0], c.out_channels, 3, 1, 1)?,
            config,
            self_attention_layers,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Self-attention layers whose maps are recorded, in record order.
    pub fn self_attention_layers(&self) -> &[String] {
        &self.self_attention_layers
    }

    /// Latent resolutions of every cross-attention layer, finest first.
    pub fn cross_attention_levels(&self, latent: (usize, usize)) -> Vec<(usize, usize)> {
        let c = &self.config;
        let mut out = Vec::new();
        for i in 0..c.depth() {
            if c.cross_attn(i) {
                let lvl = (latent.0 >> i, latent.1 >> i);
                if !out.contains(&lvl) {
                    out.push(lvl);
                }
            }
        }
        let mid = (latent.0 >> (c.depth() - 1), latent.1 >> (c.depth() - 1));
        if !out.contains(&mid) {
            out.push(mid);
        }
        out
    }

    fn time_embedding(&self, t: f64, dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
        let dim = self.config.block_out_channels[0];
        let half = dim / 2;
        let freqs: Vec<f32> = (0..half)
            .map(|i| {
                let exponent = -(10000f64.ln()) * i as f64 / (half as f64 - self.config.freq_shift);
                (t * exponent.exp()) as f32
            })
            .collect();
        let args = Tensor::from_vec(freqs, (1, half), dev)?;
        let (sin, cos) = (args.sin()?, args.cos()?);
        let emb = if self.config.flip_sin_to_cos { Tensor::cat(&[cos, sin], 1)? } else { Tensor::cat(&[sin, cos], 1)? };
        let emb = emb.to_dtype(dtype)?;
        self.time_2.forward(&silu(&self.time_1.forward(&emb)?)?)
    }

    /// Noise prediction for latent `x` of shape `(1, C, h, w)`.
    pub fn forward(&self, x: &Tensor, t: f64, cond: &UNetCond, mut rec: Option<&mut Recording>) -> Result<Tensor> {
        let record = self.self_attention_layers.as_slice();
        let temb = self.time_embedding(t, x.dtype(), x.device())?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for block in &self.down {
            for layer in &block.layers {
                h = layer.resnet.forward(&h, Some(&temb))?;
                if let Some(a) = &layer.attn {
                    h = a.forward(&h, cond, rec.as_deref_mut(), record)?;
                }
                skips.push(h.clone());
            }
            if let Some(conv) = &block.resample {
                h = conv.forward(&h)?;
                skips.push(h.clone());
            }
        }
        h = self.mid_res0.forward(&h, Some(&temb))?;
        h = self.mid_attn.forward(&h, cond, rec.as_deref_mut(), record)?;
        h = self.mid_res1.forward(&h, Some(&temb))?;
        for block in &self.up {
            for layer in &block.layers {
                let skip = skips.pop().expect("skip per up layer");
                h = layer.resnet.forward(&Tensor::cat(&[&h, &skip], 1)?, Some(&temb))?;
                if let Some(a) = &layer.attn {
                    h = a.forward(&h, cond, rec.as_deref_mut(), record)?;
                }
            }
            if let Some(conv) = &block.resample {
                let (_, _, hh, ww) = h.dims4()?;
                h = conv.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        if let Some(rec) = rec {
            rec.features = Some(h.clone());
        }
        self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)
    }
}

/// Self-attention layers of the two coarsest up-blocks that carry
/// attention; the finest level is skipped since its maps grow with the
/// fourth power of the latent side.
fn default_self_attention_layers(c: &UNetConfig) -> Vec<String> {
    let n = c.depth();
    let attn_up: Vec<usize> = (0..n).filter(|&i| c.cross_attn(n - 1 - i)).collect();
    let chosen: Vec<usize> = if attn_up.len() > 2 { attn_up[..attn_up.len() - 1].iter().rev().take(2).rev().copied().collect() } else { attn_up };
    chosen
        .iter()
        .flat_map(|&i| (0..=c.layers_per_block).map(move |j| format!("up_blocks.{i}.attentions.{j}.transformer_blocks.0.attn1")))
        .collect()
}
