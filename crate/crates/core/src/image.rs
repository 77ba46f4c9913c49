//! RGB images in `[0, 1]` and their PNG/JPEG I/O.

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, RgbImage};
use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

/// Spatial downscale factor between pixel space and latent space.
pub const LATENT_SCALE: usize = 8;

/// Default edge length of images fed to the pipeline.
pub const DEFAULT_IMAGE_SIZE: usize = 512;

/// An `H x W x 3` image with every channel value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    pixels: Array3<f32>,
}

impl ImageRGB {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Image(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Image("empty image".into()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(mut pixels: Array3<f32>) -> Result<Self> {
        pixels.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]);
        Self::new(pixels)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> ArrayView3<'_, f32> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    /// Errors unless both sides are multiples of [`LATENT_SCALE`].
    pub fn ensure_latent_compatible(&self) -> Result<()> {
        let (h, w) = self.dims();
        if h % LATENT_SCALE != 0 || w % LATENT_SCALE != 0 {
            return Err(Error::Image(format!(
                "dimensions {h}x{w} are not divisible by {LATENT_SCALE}"
            )));
        }
        Ok(())
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let n = (self.height() * self.width()) as f64;
        let mut acc = [0.0f64; 3];
        for ((_, _, c), v) in self.pixels.indexed_iter() {
            acc[c] += *v as f64;
        }
        acc.map(|a| a / n)
    }

    /// Copies the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::Image(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self {
            pixels: self
                .pixels
                .slice(s![top..top + height, left..left + width, ..])
                .to_owned(),
        })
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        if self.dims() == (height, width) {
            return self.clone();
        }
        let resized = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, FilterType::Triangle);
        Self::from_rgb8(&resized)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        });
        Self { pixels }
    }

    /// Interleaved row-major RGB8 bytes, `width * height * 3` long.
    pub fn from_rgb8_raw(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image("empty image".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!("expected {} bytes for {width}x{height} RGB8, got {}", width * height * 3, data.len())));
        }
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| data[(y * width + x) * 3 + c] as f32 / 255.0);
        Ok(Self { pixels })
    }

    pub fn to_rgb8_raw(&self) -> Vec<u8> {
        self.to_rgb8().into_raw()
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image(format!("decode failed: {e}")))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Writes the image as PNG (8 bits per channel).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        DynamicImage::ImageRgb8(self.to_rgb8())
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Codec {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(self.to_rgb8())
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("png encode failed: {e}")))?;
        Ok(out.into_inner())
    }

    /// Concatenates images left to right; all inputs must share a height.
    pub fn hconcat(images: &[ImageRGB]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Image("nothing to concatenate".into()))?;
        let h = first.height();
        if images.iter().any(|im| im.height() != h) {
            return Err(Error::Image("images differ in height".into()));
        }
        let views: Vec<_> = images.iter().map(|im| im.pixels.view()).collect();
        let pixels = ndarray::concatenate(ndarray::Axis(1), &views)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(Self { pixels })
    }
}
