//! Binary object masks and their max-pool resampling to latent and
//! attention resolutions.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Which grid a mask lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskResolution {
    Pixel,
    Latent,
    AttentionLevel(usize),
}

/// A strictly binary `H x W` mask. `true` marks the object.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    values: Array2<bool>,
    resolution: MaskResolution,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>, resolution: MaskResolution) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::Mask("mask has zero size".into()));
        }
        Ok(Self { values, resolution })
    }

    pub fn full(height: usize, width: usize, resolution: MaskResolution) -> Self {
        Self {
            values: Array2::from_elem((height, width), true),
            resolution,
        }
    }

    pub fn empty(height: usize, width: usize, resolution: MaskResolution) -> Self {
        Self {
            values: Array2::from_elem((height, width), false),
            resolution,
        }
    }

    /// Builds a mask from 8-bit levels: values `>= 128` are object.
    /// Returns the mask and whether any level was neither 0 nor 255.
    pub fn from_levels(levels: ArrayView2<'_, u8>, resolution: MaskResolution) -> Result<(Self, bool)> {
        let graded = levels.iter().any(|&v| v != 0 && v != 255);
        let values = levels.mapv(|v| v >= 128);
        Ok((Self::new(values, resolution)?, graded))
    }

    /// Row-major 8-bit levels, thresholded as in [`BinaryMask::from_levels`].
    pub fn from_raw_levels(width: usize, height: usize, data: &[u8], resolution: MaskResolution) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Mask(format!("expected {} bytes for a {width}x{height} mask, got {}", width * height, data.len())));
        }
        let levels = ArrayView2::from_shape((height, width), data).map_err(|e| Error::Mask(e.to_string()))?;
        Ok(Self::from_levels(levels, resolution)?.0)
    }

    /// Loads a single-channel PNG (0 = background, 255 = object). Colour
    /// inputs are converted to luma first; grey levels are thresholded at 0.5.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })?;
        let (mask, graded) = Self::from_luma(&img.to_luma8())?;
        if graded {
            log::warn!("mask {} is not strictly binary; thresholded at 0.5", path.display());
        }
        Ok(mask)
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Mask(format!("decode failed: {e}")))?;
        let (mask, graded) = Self::from_luma(&img.to_luma8())?;
        if graded {
            log::warn!("uploaded mask is not strictly binary; thresholded at 0.5");
        }
        Ok(mask)
    }

    fn from_luma(img: &image::GrayImage) -> Result<(Self, bool)> {
        let (w, h) = img.dimensions();
        let levels = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32).0[0]);
        Self::from_levels(levels.view(), MaskResolution::Pixel)
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let (h, w) = self.dims();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.values[[y as usize, x as usize]] { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_luma8().save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn resolution(&self) -> MaskResolution {
        self.resolution
    }

    pub fn values(&self) -> ArrayView2<'_, bool> {
        self.values.view()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[[y, x]]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|v| *v)
    }

    /// The mask as 0.0 / 1.0 values.
    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    /// Nearest-neighbour resize, used only to bring an input mask to the
    /// working image size before any max-pool resampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let (h, w) = self.dims();
        if (h, w) == (height, width) {
            return self.clone();
        }
        let values = Array2::from_shape_fn((height, width), |(y, x)| {
            let sy = ((y as f64 + 0.5) * h as f64 / height as f64) as usize;
            let sx = ((x as f64 + 0.5) * w as f64 / width as f64) as usize;
            self.values[[sy.min(h - 1), sx.min(w - 1)]]
        });
        Self {
            values,
            resolution: self.resolution,
        }
    }
}

/// Max-pools `mask` onto a `target` grid: a cell is set iff any source cell
/// it covers is set. The target must divide the source evenly.
pub fn downsample_mask(mask: &BinaryMask, target: (usize, usize), resolution: MaskResolution) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Mask(format!("target {th}x{tw} does not evenly divide {h}x{w}")));
    }
    let (fy, fx) = (h / th, w / tw);
    let values = Array2::from_shape_fn((th, tw), |(y, x)| {
        mask.values
            .slice(ndarray::s![y * fy..(y + 1) * fy, x * fx..(x + 1) * fx])
            .iter()
            .any(|v| *v)
    });
    Ok(BinaryMask { values, resolution })
}

/// One max-pooled mask per requested level, tagged `AttentionLevel(i)`.
pub fn mask_pyramid(mask: &BinaryMask, levels: &[(usize, usize)]) -> Result<Vec<BinaryMask>> {
    levels
        .iter()
        .enumerate()
        .map(|(i, &lvl)| downsample_mask(mask, lvl, MaskResolution::AttentionLevel(i)))
        .collect()
}
