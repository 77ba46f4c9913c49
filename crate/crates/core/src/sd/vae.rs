//! KL autoencoder in the diffusers layout. Encoding returns the posterior
//! mean so it is deterministic.

use candle_core::{Module, Result, Tensor};
use candle_nn::VarBuilder;
use serde::Deserialize;

use super::nn::{attention_probs, silu, Conv2d, GroupNorm, Linear};
use super::unet::ResBlock;

#[derive(Debug, Clone, Deserialize)]
pub struct VaeConfig {
    pub block_out_channels: Vec<usize>,
    #[serde(default = "one")]
    pub layers_per_block: usize,
    #[serde(default = "four")]
    pub latent_channels: usize,
    #[serde(default = "groups")]
    pub norm_num_groups: usize,
    #[serde(default = "scale")]
    pub scaling_factor: f64,
}

fn one() -> usize {
    1
}
fn four() -> usize {
    4
}
fn groups() -> usize {
    32
}
fn scale() -> f64 {
    0.18215
}

impl VaeConfig {
    pub fn sd15() -> Self {
        Self {
            block_out_channels: vec![128, 256, 512, 512],
            layers_per_block: 2,
            latent_channels: 4,
            norm_num_groups: 32,
            scaling_factor: 0.18215,
        }
    }

    /// Pixel-to-latent side ratio.
    pub fn factor(&self) -> usize {
        1 << (self.block_out_channels.len() - 1)
    }
}

/// Single-head spatial self-attention of the autoencoder mid-block.
struct AttnBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl AttnBlock {
    fn new(vb: VarBuilder, ch: usize, groups: usize) -> Result<Self> {
        let names = if vb.contains_tensor("to_q.weight") {
            ["to_q", "to_k", "to_v", "to_out.0"]
        } else {
            ["query", "key", "value", "proj_attn"]
        };
        Ok(Self {
            norm: GroupNorm::new(vb.pp("group_norm"), groups, ch, 1e-6)?,
            q: Linear::new_flexible(vb.pp(names[0]), ch, ch, true)?,
            k: Linear::new_flexible(vb.pp(names[1]), ch, ch, true)?,
            v: Linear::new_flexible(vb.pp(names[2]), ch, ch, true)?,
            out: Linear::new_flexible(vb.pp(names[3]), ch, ch, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let p = attention_probs(&self.q.forward(&seq)?, &self.k.forward(&seq)?)?;
        let y = self.out.forward(&p.matmul(&self.v.forward(&seq)?)?)?;
        x + y.transpose(1, 2)?.reshape((b, c, h, w))?
    }
}

struct Mid {
    res0: ResBlock,
    attn: AttnBlock,
    res1: ResBlock,
}

impl Mid {
    fn new(vb: VarBuilder, ch: usize, g: usize) -> Result<Self> {
        Ok(Self {
            res0: ResBlock::new(vb.pp("resnets.0"), ch, ch, None, g, 1e-6)?,
            attn: AttnBlock::new(vb.pp("attentions.0"), ch, g)?,
            res1: ResBlock::new(vb.pp("resnets.1"), ch, ch, None, g, 1e-6)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.res1.forward(&self.attn.forward(&self.res0.forward(x, None)?)?, None)
    }
}

struct Stage {
    resnets: Vec<ResBlock>,
    resample: Option<Conv2d>,
}

pub struct Vae {
    config: VaeConfig,
    enc_in: Conv2d,
    enc_down: Vec<Stage>,
    enc_mid: Mid,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    quant: Conv2d,
    post_quant: Conv2d,
    dec_in: Conv2d,
    dec_mid: Mid,
    dec_up: Vec<Stage>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

impl Vae {
    pub fn new(vb: VarBuilder, config: VaeConfig) -> Result<Self> {
        let ch = &config.block_out_channels;
        let n = ch.len();
        let g = config.norm_num_groups;
        let lc = config.latent_channels;
        let e = vb.pp("encoder");
        let mut enc_down = Vec::new();
        let mut prev = ch[0];
        for (i, &out) in ch.iter().enumerate() {
            let bvb = e.pp(format!("down_blocks.{i}"));
            let mut resnets = Vec::new();
            for j in 0..config.layers_per_block {
                resnets.push(ResBlock::new(bvb.pp(format!("resnets.{j}")), prev, out, None, g, 1e-6)?);
                prev = out;
            }
            let resample = (i + 1 < n).then(|| Conv2d::new(bvb.pp("downsamplers.0.conv"), out, out, 3, 2, 0)).transpose()?;
            enc_down.push(Stage { resnets, resample });
        }
        let top = ch[n - 1];
        let d = vb.pp("decoder");
        let mut dec_up = Vec::new();
        prev = top;
        for i in 0..n {
            let out = ch[n - 1 - i];
            let bvb = d.pp(format!("up_blocks.{i}"));
            let mut resnets = Vec::new();
            for j in 0..=config.layers_per_block {
                resnets.push(ResBlock::new(bvb.pp(format!("resnets.{j}")), prev, out, None, g, 1e-6)?);
                prev = out;
            }
            let resample = (i + 1 < n).then(|| Conv2d::new(bvb.pp("upsamplers.0.conv"), out, out, 3, 1, 1)).transpose()?;
            dec_up.push(Stage { resnets, resample });
        }
        Ok(Self {
            enc_in: Conv2d::new(e.pp("conv_in"), 3, ch[0], 3, 1, 1)?,
            enc_down,
            enc_mid: Mid::new(e.pp("mid_block"), top, g)?,
            enc_norm: GroupNorm::new(e.pp("conv_norm_out"), g, top, 1e-6)?,
            enc_out: Conv2d::new(e.pp("conv_out"), top, 2 * lc, 3, 1, 1)?,
            quant: Conv2d::new(vb.pp("quant_conv"), 2 * lc, 2 * lc, 1, 1, 0)?,
            post_quant: Conv2d::new(vb.pp("post_quant_conv"), lc, lc, 1, 1, 0)?,
            dec_in: Conv2d::new(d.pp("conv_in"), lc, top, 3, 1, 1)?,
            dec_mid: Mid::new(d.pp("mid_block"), top, g)?,
            dec_up,
            dec_norm: GroupNorm::new(d.pp("conv_norm_out"), g, ch[0], 1e-6)?,
            dec_out: Conv2d::new(d.pp("conv_out"), ch[0], 3, 3, 1, 1)?,
            config,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    /// Pixels in `[-1, 1]`, `(1, 3, H, W)`, to the scaled posterior mean.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.enc_in.forward(x)?;
        for stage in &self.enc_down {
            for r in &stage.resnets {
                h = r.forward(&h, None)?;
            }
            if let Some(conv) = &stage.resample {
                h = conv.forward(&h.pad_with_zeros(3, 0, 1)?.pad_with_zeros(2, 0, 1)?)?;
            }
        }
        h = self.enc_mid.forward(&h)?;
        h = self.enc_out.forward(&silu(&self.enc_norm.forward(&h)?)?)?;
        let moments = self.quant.forward(&h)?;
        let mean = moments.narrow(1, 0, self.config.latent_channels)?;
        mean * self.config.scaling_factor
    }

    /// Scaled latent to pixels in `[-1, 1]` (unclamped).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let z = (z / self.config.scaling_factor)?;
        let mut h = self.dec_in.forward(&self.post_quant.forward(&z)?)?;
        h = self.dec_mid.forward(&h)?;
        for stage in &self.dec_up {
            for r in &stage.resnets {
                h = r.forward(&h, None)?;
            }
            if let Some(conv) = &stage.resample {
                let (_, _, hh, ww) = h.dims4()?;
                h = conv.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        self.dec_out.forward(&silu(&self.dec_norm.forward(&h)?)?)
    }
}
