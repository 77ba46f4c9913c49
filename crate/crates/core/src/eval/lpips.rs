//! Learned perceptual patch similarity over an AlexNet-shaped feature stack.
//!
//! Weights are read from one safetensors file holding the five feature
//! convolutions (`features.{0,3,6,8,10}.{weight,bias}`) and the linear heads
//! (`lin{0..4}.model.1.weight`). Channel widths are taken from the tensors,
//! so narrow test networks load the same way as the real one.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::image::ImageRGB;

/// Environment variable naming the perceptual weights file directly.
pub const LPIPS_WEIGHTS_ENV: &str = "MATFUSE_LPIPS_WEIGHTS";
pub const LPIPS_WEIGHTS_FILE: &str = "lpips_alex.safetensors";

/// (tensor index, stride, padding, max-pool before)
const LAYERS: [(usize, usize, usize, bool); 5] = [(0, 4, 2, false), (3, 1, 2, true), (6, 1, 1, true), (8, 1, 1, false), (10, 1, 1, false)];
const KERNELS: [usize; 5] = [11, 5, 3, 3, 3];

// float32 constants of the reference scaling layer
const SHIFT: [f32; 3] = [-0.030, -0.088, -0.188];
const SCALE: [f32; 3] = [0.458, 0.448, 0.450];
const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
struct Conv {
    /// `cout x (cin * k * k)`
    weight: Array2<f64>,
    bias: Array1<f64>,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    pool_before: bool,
}

#[derive(Debug, Clone)]
pub struct Lpips {
    convs: Vec<Conv>,
    lins: Vec<Array1<f64>>,
    label: String,
}

fn read_tensor(st: &SafeTensors<'_>, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let view = st.tensor(name).map_err(|e| Error::PerceptualWeights(format!("tensor {name}: {e}")))?;
    let bytes = view.data();
    let values = match view.dtype() {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        other => return Err(Error::PerceptualWeights(format!("tensor {name} has unsupported dtype {other:?}"))),
    };
    Ok((view.shape().to_vec(), values))
}

impl Lpips {
    /// Resolves the weights file: `$MATFUSE_LPIPS_WEIGHTS`, else
    /// `lpips_alex.safetensors` inside `weights_dir` or `$MATFUSE_WEIGHTS_DIR`.
    pub fn locate(weights_dir: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = std::env::var_os(LPIPS_WEIGHTS_ENV) {
            return Ok(PathBuf::from(p));
        }
        let dir = weights_dir
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(crate::denoiser::WEIGHTS_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Error::PerceptualWeights(format!(
                    "set {LPIPS_WEIGHTS_ENV} or {} to locate {LPIPS_WEIGHTS_FILE}",
                    crate::denoiser::WEIGHTS_ENV
                ))
            })?;
        Ok(dir.join(LPIPS_WEIGHTS_FILE))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::PerceptualWeights(format!("{}: {e}", path.display())))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::PerceptualWeights(format!("{}: {e}", path.display())))?;
        Self::from_safetensors(&st, format!("alexnet:{}", path.display()))
    }

    pub fn from_safetensors(st: &SafeTensors<'_>, label: impl Into<String>) -> Result<Self> {
        let mut convs = Vec::with_capacity(5);
        let mut lins = Vec::with_capacity(5);
        let mut cin = 3;
        for (i, &(idx, stride, pad, pool_before)) in LAYERS.iter().enumerate() {
            let (wshape, w) = read_tensor(st, &format!("features.{idx}.weight"))?;
            let (bshape, b) = read_tensor(st, &format!("features.{idx}.bias"))?;
            let [cout, wc, kh, kw] = wshape[..] else {
                return Err(Error::PerceptualWeights(format!("features.{idx}.weight must be 4-d, got {wshape:?}")));
            };
            if wc != cin || kh != KERNELS[i] || kw != KERNELS[i] || bshape != [cout] {
                return Err(Error::PerceptualWeights(format!(
                    "features.{idx}: weight {wshape:?} / bias {bshape:?} do not fit {cin} input channels and kernel {}",
                    KERNELS[i]
                )));
            }
            let (lshape, l) = read_tensor(st, &format!("lin{i}.model.1.weight"))?;
            if lshape.iter().product::<usize>() != cout || lshape.first() != Some(&1) {
                return Err(Error::PerceptualWeights(format!("lin{i}.model.1.weight {lshape:?} does not fit {cout} channels")));
            }
            convs.push(Conv {
                weight: Array2::from_shape_vec((cout, cin * kh * kw), w).expect("checked shape"),
                bias: Array1::from(b),
                cin,
                k: kh,
                stride,
                pad,
                pool_before,
            });
            lins.push(Array1::from(l));
            cin = cout;
        }
        Ok(Self {
            convs,
            lins,
            label: label.into(),
        })
    }

    /// Seeded random network of the given channel widths. Only meaningful as
    /// a weight-free stand-in; reports carry its label.
    pub fn random(seed: u64, widths: [usize; 5]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut convs = Vec::new();
        let mut lins = Vec::new();
        for (i, &(_, stride, pad, pool_before)) in LAYERS.iter().enumerate() {
            let k = KERNELS[i];
            let fan_in = cin * k * k;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let uni = Uniform::new(0.0, 1.0).expect("valid range");
            convs.push(Conv {
                weight: Array2::from_shape_fn((widths[i], fan_in), |_| normal.sample(&mut rng)),
                bias: Array1::zeros(widths[i]),
                cin,
                k,
                stride,
                pad,
                pool_before,
            });
            lins.push(Array1::from_shape_fn(widths[i], |_| uni.sample(&mut rng)));
            cin = widths[i];
        }
        Self {
            convs,
            lins,
            label: format!("alexnet-random:seed={seed}"),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn widths(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.weight.nrows()).collect()
    }

    fn features(&self, img: &ImageRGB) -> Result<Vec<Array3<f64>>> {
        let px = img.pixels();
        let (h, w) = img.dims();
        let mut x = Array3::from_shape_fn((3, h, w), |(c, y, xx)| {
            let v = 2.0 * px[[y, xx, c]] as f64 - 1.0;
            (v - SHIFT[c] as f64) / SCALE[c] as f64
        });
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            if conv.pool_before {
                x = max_pool(x.view())?;
            }
            x = conv2d(x.view(), conv)?;
            x.mapv_inplace(|v| v.max(0.0));
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Perceptual distance between two equally sized images.
    pub fn distance(&self, a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("lpips inputs differ in size: {:?} vs {:?}", a.dims(), b.dims())));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = 0.0;
        for ((x, y), lin) in fa.iter().zip(&fb).zip(&self.lins) {
            let (nx, ny) = (unit_channels(x), unit_channels(y));
            let d = (&nx - &ny).mapv(|v| v * v);
            let (c, h, w) = d.dim();
            let flat = d.into_shape_with_order((c, h * w)).expect("contiguous features");
            // 1x1 linear head, then spatial mean
            total += lin.dot(&flat).mean().unwrap_or(0.0);
        }
        Ok(total)
    }
}

/// Normalizes each spatial position's channel vector to unit length.
fn unit_channels(x: &Array3<f64>) -> Array3<f64> {
    let norm = x.mapv(|v| v * v).sum_axis(Axis(0)).mapv(|v| v.sqrt() + NORM_EPS);
    x / &norm.insert_axis(Axis(0))
}

fn max_pool(x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("image too small for the perceptual network ({h}x{w} feature map)")));
    }
    let (ho, wo) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
    Ok(Array3::from_shape_fn((c, ho, wo), |(ci, y, xx)| {
        x.slice(s![ci, 2 * y..2 * y + 3, 2 * xx..2 * xx + 3]).fold(f64::NEG_INFINITY, |m, v| m.max(*v))
    }))
}

fn conv2d(x: ArrayView3<'_, f64>, conv: &Conv) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    debug_assert_eq!(c, conv.cin);
    let (k, st, p) = (conv.k, conv.stride, conv.pad);
    if h + 2 * p < k || w + 2 * p < k {
        return Err(Error::Shape(format!("image too small for the perceptual network ({h}x{w} feature map)")));
    }
    let ho = (h + 2 * p - k) / st + 1;
    let wo = (w + 2 * p - k) / st + 1;
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let mut row = cols.row_mut((ci * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = (oy * st + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * st + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    let mut out = conv.weight.dot(&cols);
    out += &conv.bias.view().insert_axis(Axis(1));
    Ok(out.into_shape_with_order((conv.weight.nrows(), ho, wo)).expect("conv output size"))
}
