//! A small, seeded, weight-free backend with closed-form gradients.
//!
//! The noise prediction for a latent `z` (tokens `x_p`, one per latent cell) is
//!
//! ```text
//! eps_p = W_out tanh(W_in x_p + b(t)) + sum_s up_s(W_c,s Z_new,s)_p
//! ```
//!
//! where each cross-attention site `s` (latent grid and one pooled grid)
//! runs decoupled text / image-prompt attention on queries from the
//! (pooled) latent. Two self-attention maps are computed on pooled grids
//! and the feature map is a fixed linear map of `z`. Every piece is smooth
//! so the vector-Jacobian products are exact.
//!
//! Encoder and decoder are an orthonormal linear pair acting on 8x8 pixel
//! blocks: the latent holds the per-channel block mean and one zero-mean
//! luminance pattern, so `encode(decode(z)) == z` and
//! `decode(encode(x)) == x` for images in the decoder's range.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{BackendManifest, Conditioning, Denoiser, DenoiserInternals, MaterialEmbedding, NoisePrediction};
use crate::conditioning::{
    attention, attention_backward, decoupled_attention_backward_queries, decoupled_attention_full, softmax_rows,
    softmax_backward, AttentionInputs,
};
use crate::error::{Error, Result};
use crate::image::{ImageRGB, LATENT_SCALE};
use crate::latent::{LatentState, LATENT_CHANNELS};

const HIDDEN: usize = 16;
const ATTN_DIM: usize = 8;
const VALUE_DIM: usize = 8;
const TOKEN_DIM: usize = 8;
const TEXT_TOKENS: usize = 4;
const IMAGE_TOKENS: usize = 4;
const FEATURES: usize = 6;
const CODEC_SCALE: f64 = 0.25;

struct CrossSite {
    /// pooling factor from the latent grid
    factor: (usize, usize),
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wk_img: Array2<f64>,
    wv_img: Array2<f64>,
    wc: Array2<f64>,
}

struct SelfAttnLevel {
    factor: (usize, usize),
    wq: Array2<f64>,
    wk: Array2<f64>,
}

pub struct ToyBackend {
    manifest: BackendManifest,
    seed: u64,
    latent: (usize, usize),
    constant: Option<f64>,
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    time_freq: Array1<f64>,
    w_out: Array2<f64>,
    w_feat: Array2<f64>,
    sites: Vec<CrossSite>,
    levels: Vec<SelfAttnLevel>,
    material_proj: Array2<f64>,
    /// `192 x 4` orthonormal block basis, rows ordered (dy, dx, channel).
    codec: Array2<f64>,
}

/// Toy backend for 512x512 images.
pub fn make_toy_backend(seed: u64) -> ToyBackend {
    ToyBackend::new(seed, 512, 512).expect("512x512 is a valid toy size")
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

/// Coarsest-allowed grid: the largest divisors of `h` and `w` not above `cap`.
fn pooled_grid(h: usize, w: usize, cap: usize) -> (usize, usize) {
    let divisor = |n: usize| (1..=n.min(cap).max(1)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1);
    (divisor(h), divisor(w))
}

fn block_codec() -> Array2<f64> {
    let n = LATENT_SCALE;
    let mut d = Array2::zeros((n * n * 3, LATENT_CHANNELS));
    let inv = 1.0 / n as f64;
    // luminance pattern: centred diagonal ramp, zero mean per channel
    let ramp = |dy: usize, dx: usize| (dy as f64 - 3.5) + (dx as f64 - 3.5);
    let norm: f64 = (0..n)
        .flat_map(|dy| (0..n).map(move |dx| ramp(dy, dx).powi(2) * 3.0))
        .sum::<f64>()
        .sqrt();
    for dy in 0..n {
        for dx in 0..n {
            for c in 0..3 {
                let row = (dy * n + dx) * 3 + c;
                d[[row, c]] = inv;
                d[[row, 3]] = ramp(dy, dx) / norm;
            }
        }
    }
    d
}

/// Latent `C x h x w` to tokens `(h*w) x C`, row-major over cells.
fn to_tokens(z: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = z.dim();
    z.to_shape((c, h * w)).expect("contiguous reshape").t().to_owned()
}

fn from_tokens(tokens: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = tokens.ncols();
    tokens.t().to_owned().into_shape_clone((c, h, w)).expect("token count matches grid")
}

/// Average-pools the latent by `factor`, returning tokens of the coarse grid.
fn pool(z: &Array3<f64>, factor: (usize, usize)) -> Array2<f64> {
    let (c, h, w) = z.dim();
    let (fy, fx) = factor;
    let (gh, gw) = (h / fy, w / fx);
    let norm = 1.0 / (fy * fx) as f64;
    Array2::from_shape_fn((gh * gw, c), |(cell, ch)| {
        let (gy, gx) = (cell / gw, cell % gw);
        z.slice(s![ch, gy * fy..(gy + 1) * fy, gx * fx..(gx + 1) * fx]).sum() * norm
    })
}

/// Adjoint of [`pool`]: spreads coarse-token gradients back onto the latent.
fn pool_adjoint(grad: &Array2<f64>, factor: (usize, usize), h: usize, w: usize) -> Array3<f64> {
    let (fy, fx) = factor;
    let gw = w / fx;
    let norm = 1.0 / (fy * fx) as f64;
    Array3::from_shape_fn((grad.ncols(), h, w), |(ch, y, x)| grad[[(y / fy) * gw + x / fx, ch]] * norm)
}

/// Nearest upsampling of coarse tokens back to latent tokens.
fn upsample(tokens: &Array2<f64>, factor: (usize, usize), h: usize, w: usize) -> Array2<f64> {
    let (fy, fx) = factor;
    let gw = w / fx;
    Array2::from_shape_fn((h * w, tokens.ncols()), |(p, ch)| {
        let (y, x) = (p / w, p % w);
        tokens[[(y / fy) * gw + x / fx, ch]]
    })
}

fn upsample_adjoint(grad: &Array2<f64>, factor: (usize, usize), h: usize, w: usize) -> Array2<f64> {
    let (fy, fx) = factor;
    let gw = w / fx;
    let mut out = Array2::zeros(((h / fy) * gw, grad.ncols()));
    for (p, row) in grad.axis_iter(Axis(0)).enumerate() {
        let (y, x) = (p / w, p % w);
        let mut dst = out.row_mut((y / fy) * gw + x / fx);
        dst += &row;
    }
    out
}

/// Per-site forward values needed for the backward pass.
struct SiteForward {
    queries: Array2<f64>,
    text_keys: Array2<f64>,
    text_values: Array2<f64>,
    image_keys: Option<Array2<f64>>,
    image_values: Option<Array2<f64>>,
    text_probs: Array2<f64>,
    image_probs: Option<Array2<f64>>,
    lambda: f64,
}

impl ToyBackend {
    /// A toy backend for `height x width` pixel images with seeded weights.
    pub fn new(seed: u64, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || !height.is_multiple_of(LATENT_SCALE) || !width.is_multiple_of(LATENT_SCALE) {
            return Err(Error::Shape(format!(
                "toy backend needs image sides divisible by {LATENT_SCALE}, got {height}x{width}"
            )));
        }
        let (h, w) = (height / LATENT_SCALE, width / LATENT_SCALE);
        let g1 = pooled_grid(h, w, 16);
        let g2 = pooled_grid(g1.0, g1.1, (g1.0.max(g1.1) / 2).max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = LATENT_CHANNELS;

        let w_in = gaussian(&mut rng, HIDDEN, c, 1.0 / (c as f64).sqrt());
        let b_in = gaussian(&mut rng, 1, HIDDEN, 0.5).into_shape_clone(HIDDEN).unwrap();
        let time_freq = gaussian(&mut rng, 1, HIDDEN, 1.0).into_shape_clone(HIDDEN).unwrap();
        let w_out = gaussian(&mut rng, c, HIDDEN, 1.0 / (HIDDEN as f64).sqrt());
        let w_feat = gaussian(&mut rng, FEATURES, c, 1.0 / (c as f64).sqrt());

        let mut sites = Vec::new();
        for factor in [(1, 1), (h / g1.0, w / g1.1)] {
            sites.push(CrossSite {
                factor,
                wq: gaussian(&mut rng, ATTN_DIM, c, 1.0 / (c as f64).sqrt()),
                wk: gaussian(&mut rng, ATTN_DIM, TOKEN_DIM, 1.0 / (TOKEN_DIM as f64).sqrt()),
                wv: gaussian(&mut rng, VALUE_DIM, TOKEN_DIM, 1.0 / (TOKEN_DIM as f64).sqrt()),
                wk_img: gaussian(&mut rng, ATTN_DIM, TOKEN_DIM, 1.0 / (TOKEN_DIM as f64).sqrt()),
                wv_img: gaussian(&mut rng, VALUE_DIM, TOKEN_DIM, 1.0 / (TOKEN_DIM as f64).sqrt()),
                wc: gaussian(&mut rng, c, VALUE_DIM, 0.5 / (VALUE_DIM as f64).sqrt()),
            });
        }
        let mut levels = Vec::new();
        for grid in [g1, g2] {
            levels.push(SelfAttnLevel {
                factor: (h / grid.0, w / grid.1),
                wq: gaussian(&mut rng, ATTN_DIM, c, 1.0),
                wk: gaussian(&mut rng, ATTN_DIM, c, 1.0),
            });
        }
        let material_proj = gaussian(&mut rng, IMAGE_TOKENS * TOKEN_DIM, 3, 1.0);

        let attention_shapes = [g1, g2].iter().map(|g| vec![g.0 * g.1, g.0 * g.1]).collect();
        let manifest = BackendManifest {
            name: "toy".into(),
            latent_shape: [c, h, w],
            image_size: [height, width],
            attention_layers: vec!["toy.self_attn.level1".into(), "toy.self_attn.level2".into()],
            attention_shapes,
            feature_shape: vec![FEATURES, h, w],
            cross_attention_levels: vec![[h, w], [g1.0, g1.1]],
            embedding_tokens: IMAGE_TOKENS,
            embedding_dim: TOKEN_DIM,
            seed: Some(seed),
            weights: None,
        };
        Ok(Self {
            manifest,
            seed,
            latent: (h, w),
            constant: None,
            w_in,
            b_in,
            time_freq,
            w_out,
            w_feat,
            sites,
            levels,
            material_proj,
            codec: block_codec(),
        })
    }

    /// Same backend whose noise prediction is the constant `value`
    /// everywhere. Internals are unchanged.
    pub fn constant(seed: u64, height: usize, width: usize, value: f64) -> Result<Self> {
        let mut b = Self::new(seed, height, width)?;
        b.constant = Some(value);
        b.manifest.name = "toy-constant".into();
        Ok(b)
    }

    /// The `C x 3` projection applied to the mean colour, reshaped to tokens.
    pub fn material_projection(&self) -> ArrayView2<'_, f64> {
        self.material_proj.view()
    }

    fn check_latent(&self, z: &LatentState) -> Result<()> {
        let [c, h, w] = self.manifest.latent_shape;
        if z.data.dim() != (c, h, w) {
            return Err(Error::Shape(format!("latent {:?} does not match backend {:?}", z.data.dim(), (c, h, w))));
        }
        Ok(())
    }

    fn time_bias(&self, timestep: usize) -> Array1<f64> {
        let phase = timestep as f64 / 1000.0 * std::f64::consts::PI;
        &self.b_in + &self.time_freq.mapv(|f| 0.5 * (f * phase).sin())
    }

    /// Deterministic text tokens of a prompt; the empty prompt maps to zeros.
    pub fn text_tokens(&self, prompt: &str) -> Array2<f64> {
        if prompt.is_empty() {
            return Array2::zeros((TEXT_TOKENS, TOKEN_DIM));
        }
        let digest = Sha256::digest(prompt.as_bytes());
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed_bytes) ^ self.seed);
        gaussian(&mut rng, TEXT_TOKENS, TOKEN_DIM, 1.0)
    }

    fn site_forward(&self, site_idx: usize, x: &Array2<f64>, cond: &Conditioning) -> Result<(Array2<f64>, SiteForward)> {
        let site = &self.sites[site_idx];
        let queries = x.dot(&site.wq.t());
        let text = self.text_tokens(cond.prompt());
        let text_keys = text.dot(&site.wk.t());
        let text_values = text.dot(&site.wv.t());
        match cond {
            Conditioning::Null | Conditioning::Text { .. } => {
                let (out, text_probs) = attention(queries.view(), text_keys.view(), text_values.view());
                Ok((
                    out,
                    SiteForward {
                        queries,
                        text_keys,
                        text_values,
                        image_keys: None,
                        image_values: None,
                        text_probs,
                        image_probs: None,
                        lambda: 0.0,
                    },
                ))
            }
            Conditioning::TextImage {
                material,
                lambda,
                masks,
                ..
            } => {
                let mask = masks.get(site_idx).ok_or_else(|| {
                    Error::Shape(format!("expected {} level masks, got {}", self.sites.len(), masks.len()))
                })?;
                if material.tokens.ncols() != TOKEN_DIM {
                    return Err(Error::Shape(format!(
                        "material embedding dim {} != {TOKEN_DIM}",
                        material.tokens.ncols()
                    )));
                }
                let image_keys = material.tokens.dot(&site.wk_img.t());
                let image_values = material.tokens.dot(&site.wv_img.t());
                let inputs = AttentionInputs {
                    queries: queries.view(),
                    text_keys: text_keys.view(),
                    text_values: text_values.view(),
                    image_keys: image_keys.view(),
                    image_values: image_values.view(),
                    lambda: *lambda,
                    mask,
                };
                let fwd = decoupled_attention_full(&inputs)?;
                Ok((
                    fwd.output,
                    SiteForward {
                        queries,
                        text_keys,
                        text_values,
                        image_keys: Some(image_keys),
                        image_values: Some(image_values),
                        text_probs: fwd.text_probs,
                        image_probs: fwd.image_probs,
                        lambda: *lambda,
                    },
                ))
            }
        }
    }

    fn internals(&self, z: &Array3<f64>) -> (DenoiserInternals, Vec<(Array2<f64>, Array2<f64>, Array2<f64>)>) {
        let (h, w) = self.latent;
        let mut maps = Vec::new();
        let mut cache = Vec::new();
        for level in &self.levels {
            let x = pool(z, level.factor);
            let q = x.dot(&level.wq.t());
            let k = x.dot(&level.wk.t());
            let scale = 1.0 / (ATTN_DIM as f64).sqrt();
            let a = softmax_rows(&(q.dot(&k.t()) * scale));
            maps.push(a.clone().into_dyn());
            cache.push((q, k, a));
        }
        let feats = from_tokens(&to_tokens(z).dot(&self.w_feat.t()), h, w);
        (
            DenoiserInternals {
                self_attn: maps,
                features: feats.into_dyn(),
            },
            cache,
        )
    }

    fn forward(&self, z: &Array3<f64>, timestep: usize, cond: &Conditioning) -> Result<(Array2<f64>, Vec<SiteForward>, Array2<f64>)> {
        let (h, w) = self.latent;
        let x0 = to_tokens(z);
        let hidden = (x0.dot(&self.w_in.t()) + &self.time_bias(timestep)).mapv(f64::tanh);
        let mut eps = hidden.dot(&self.w_out.t());
        let mut sites = Vec::with_capacity(self.sites.len());
        for (i, site) in self.sites.iter().enumerate() {
            let x = if site.factor == (1, 1) { x0.clone() } else { pool(z, site.factor) };
            let (out, fwd) = self.site_forward(i, &x, cond)?;
            let projected = out.dot(&site.wc.t());
            eps += &upsample(&projected, site.factor, h, w);
            sites.push(fwd);
        }
        Ok((eps, sites, hidden))
    }

    /// `d/dz <cotangent, eps(z)>` for the full noise prediction.
    pub fn noise_vjp(&self, z: &LatentState, timestep: usize, cond: &Conditioning, cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        if cotangent.dim() != z.data.dim() {
            return Err(Error::Shape("cotangent shape differs from latent".into()));
        }
        let (h, w) = self.latent;
        if self.constant.is_some() {
            return Ok(Array3::zeros(z.data.dim()));
        }
        let (_, sites, hidden) = self.forward(&z.data, timestep, cond)?;
        let d_eps = to_tokens(cotangent);
        let d_hidden = d_eps.dot(&self.w_out) * hidden.mapv(|v| 1.0 - v * v);
        let mut grad = from_tokens(&d_hidden.dot(&self.w_in), h, w);
        for (i, (site, fwd)) in self.sites.iter().zip(&sites).enumerate() {
            let d_out = upsample_adjoint(&d_eps, site.factor, h, w).dot(&site.wc);
            let dq = match (&fwd.image_keys, &fwd.image_values) {
                (Some(ki), Some(vi)) => {
                    let Conditioning::TextImage { masks, .. } = cond else {
                        unreachable!("image tokens imply image conditioning")
                    };
                    let inputs = AttentionInputs {
                        queries: fwd.queries.view(),
                        text_keys: fwd.text_keys.view(),
                        text_values: fwd.text_values.view(),
                        image_keys: ki.view(),
                        image_values: vi.view(),
                        lambda: fwd.lambda,
                        mask: &masks[i],
                    };
                    let replay = crate::conditioning::DecoupledAttention {
                        output: Array2::zeros((0, 0)),
                        text_probs: fwd.text_probs.clone(),
                        image_probs: fwd.image_probs.clone(),
                    };
                    decoupled_attention_backward_queries(&inputs, &replay, d_out.view())
                }
                _ => {
                    attention_backward(
                        d_out.view(),
                        &fwd.text_probs,
                        fwd.queries.view(),
                        fwd.text_keys.view(),
                        fwd.text_values.view(),
                    )
                    .0
                }
            };
            grad += &pool_adjoint(&dq.dot(&site.wq), site.factor, h, w);
        }
        Ok(grad)
    }
}

impl Denoiser for ToyBackend {
    fn manifest(&self) -> &BackendManifest {
        &self.manifest
    }

    fn encode(&self, image: &ImageRGB) -> Result<LatentState> {
        let [hh, ww] = self.manifest.image_size;
        if image.dims() != (hh, ww) {
            return Err(Error::Shape(format!("image {:?} does not match backend {hh}x{ww}", image.dims())));
        }
        let (h, w) = self.latent;
        let px = image.pixels();
        let n = LATENT_SCALE;
        let mut z = Array3::zeros((LATENT_CHANNELS, h, w));
        for by in 0..h {
            for bx in 0..w {
                for dy in 0..n {
                    for dx in 0..n {
                        for c in 0..3 {
                            let v = px[[by * n + dy, bx * n + dx, c]] as f64 - 0.5;
                            let row = self.codec.row((dy * n + dx) * 3 + c);
                            for k in 0..LATENT_CHANNELS {
                                z[[k, by, bx]] += row[k] * v;
                            }
                        }
                    }
                }
            }
        }
        z.mapv_inplace(|v| v * CODEC_SCALE);
        Ok(LatentState::new(z, 0))
    }

    fn decode(&self, z: &LatentState) -> Result<ImageRGB> {
        self.check_latent(z)?;
        let (h, w) = self.latent;
        let n = LATENT_SCALE;
        let mut px = Array3::<f32>::zeros((h * n, w * n, 3));
        for by in 0..h {
            for bx in 0..w {
                for dy in 0..n {
                    for dx in 0..n {
                        for c in 0..3 {
                            let row = self.codec.row((dy * n + dx) * 3 + c);
                            let v: f64 = (0..LATENT_CHANNELS).map(|k| row[k] * z.data[[k, by, bx]]).sum::<f64>() / CODEC_SCALE;
                            px[[by * n + dy, bx * n + dx, c]] = (0.5 + v) as f32;
                        }
                    }
                }
            }
        }
        ImageRGB::from_clamped(px)
    }

    fn embed_material(&self, image: &ImageRGB) -> Result<MaterialEmbedding> {
        let mean = Array1::from(image.mean_color().to_vec());
        let flat = self.material_proj.dot(&mean);
        Ok(MaterialEmbedding {
            tokens: flat.into_shape_clone((IMAGE_TOKENS, TOKEN_DIM)).expect("projection size"),
        })
    }

    fn predict_noise(&self, z: &LatentState, timestep: usize, cond: &Conditioning, record_internals: bool) -> Result<NoisePrediction> {
        self.check_latent(z)?;
        let (h, w) = self.latent;
        let noise = match self.constant {
            Some(c) => Array3::from_elem(z.data.dim(), c),
            None => {
                let (eps, _, _) = self.forward(&z.data, timestep, cond)?;
                from_tokens(&eps, h, w)
            }
        };
        let internals = record_internals.then(|| self.internals(&z.data).0);
        Ok(NoisePrediction { noise, internals })
    }

    fn internals_vjp(&self, z: &LatentState, _timestep: usize, _cond: &Conditioning, cotangent: &DenoiserInternals) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        let (h, w) = self.latent;
        if cotangent.self_attn.len() != self.levels.len() {
            return Err(Error::Shape(format!(
                "expected {} attention cotangents, got {}",
                self.levels.len(),
                cotangent.self_attn.len()
            )));
        }
        let (_, cache) = self.internals(&z.data);
        let feat_shape = IxDyn(&self.manifest.feature_shape);
        if cotangent.features.raw_dim() != feat_shape {
            return Err(Error::Shape("feature cotangent shape mismatch".into()));
        }
        let d_feat = cotangent
            .features
            .view()
            .into_shape_with_order((FEATURES, h, w))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let mut grad = from_tokens(&to_tokens(&d_feat).dot(&self.w_feat), h, w);
        let scale = 1.0 / (ATTN_DIM as f64).sqrt();
        for ((level, (q, k, a)), d_a) in self.levels.iter().zip(&cache).zip(&cotangent.self_attn) {
            let d_a = d_a
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::Shape(e.to_string()))?;
            if d_a.dim() != a.dim() {
                return Err(Error::Shape("attention cotangent shape mismatch".into()));
            }
            let ds = softmax_backward(a, &d_a.to_owned()) * scale;
            let dq = ds.dot(k);
            let dk = ds.t().dot(q);
            let dx = dq.dot(&level.wq) + dk.dot(&level.wk);
            grad += &pool_adjoint(&dx, level.factor, h, w);
        }
        Ok(grad)
    }
}
