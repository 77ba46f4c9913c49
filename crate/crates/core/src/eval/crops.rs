//! Mask-constrained crops and their mean pairwise embedding similarity.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::mask::{BinaryMask, MaskResolution};

pub const DEFAULT_CROP_SIZES: [usize; 2] = [64, 128];

/// Crop sizes and grid stride (`None`: half of each size).
#[derive(Debug, Clone, PartialEq)]
pub struct CropSpec {
    pub sizes: Vec<usize>,
    pub stride: Option<usize>,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_CROP_SIZES.to_vec(),
            stride: None,
        }
    }
}

impl CropSpec {
    pub fn stride_for(&self, size: usize) -> usize {
        self.stride.unwrap_or((size / 2).max(1))
    }
}

#[derive(Debug, Clone)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub image: ImageRGB,
}

/// Summed-area table with a zero first row and column.
fn integral(mask: &BinaryMask) -> Array2<usize> {
    let (h, w) = mask.dims();
    let mut s = Array2::zeros((h + 1, w + 1));
    for y in 0..h {
        for x in 0..w {
            s[[y + 1, x + 1]] = usize::from(mask.get(y, x)) + s[[y, x + 1]] + s[[y + 1, x]] - s[[y, x]];
        }
    }
    s
}

/// Every stride-grid crop whose footprint lies entirely inside `mask`.
pub fn extract_crops(img: &ImageRGB, mask: &BinaryMask, spec: &CropSpec) -> Result<Vec<Crop>> {
    if mask.dims() != img.dims() {
        return Err(Error::Mask(format!("mask {:?} does not match image {:?}", mask.dims(), img.dims())));
    }
    let (h, w) = img.dims();
    if spec.sizes.is_empty() {
        return Err(Error::Invalid("no crop sizes given".into()));
    }
    if let Some(&s) = spec.sizes.iter().find(|&&s| s == 0 || s > h || s > w) {
        return Err(Error::Invalid(format!("crop size {s} does not fit a {h}x{w} image")));
    }
    let sat = integral(mask);
    let mut crops = Vec::new();
    for &size in &spec.sizes {
        let stride = spec.stride_for(size);
        for top in (0..=h - size).step_by(stride) {
            for left in (0..=w - size).step_by(stride) {
                let (b, r) = (top + size, left + size);
                let inside = sat[[b, r]] + sat[[top, left]] - sat[[top, r]] - sat[[b, left]];
                if inside == size * size {
                    crops.push(Crop {
                        top,
                        left,
                        size,
                        image: img.crop(top, left, size, size)?,
                    });
                }
            }
        }
    }
    if crops.is_empty() {
        return Err(Error::MaskTooSmall { sizes: spec.sizes.clone() });
    }
    Ok(crops)
}

/// Image embedding model used for crop similarity.
pub trait ImageEmbedder: Send + Sync {
    /// Identifier recorded in reports.
    fn name(&self) -> &str;

    fn embed(&self, image: &ImageRGB) -> Result<Vec<f64>>;

    fn embed_batch(&self, images: &[ImageRGB]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|i| self.embed(i)).collect()
    }
}

/// Weight-free embedder: an 8x8 area-downsampled, centred thumbnail through
/// a seeded Gaussian projection.
pub struct ToyEmbedder {
    proj: Array2<f64>,
    name: String,
}

const TOY_THUMB: usize = 8;
const TOY_DIM: usize = 64;

impl ToyEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Array2::from_shape_fn((TOY_DIM, TOY_THUMB * TOY_THUMB * 3), |_| StandardNormal.sample(&mut rng));
        Self {
            proj,
            name: format!("toy-thumbnail:seed={seed}"),
        }
    }
}

impl ImageEmbedder for ToyEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, image: &ImageRGB) -> Result<Vec<f64>> {
        let thumb = image.resize(TOY_THUMB, TOY_THUMB);
        let v: Array1<f64> = thumb.pixels().iter().map(|p| *p as f64 - 0.5).collect();
        Ok(self.proj.dot(&v).to_vec())
    }
}

fn unit(v: &[f64]) -> Result<Array1<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Invalid("embedding has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Mean cosine similarity over all pairs `(a_i, b_j)`.
pub fn mean_pairwise_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("empty crop set".into()));
    }
    // mean_ij <a_i, b_j> = <mean_i a_i, mean_j b_j> for unit vectors
    let mean = |set: &[Vec<f64>]| -> Result<Array1<f64>> {
        let mut acc = unit(&set[0])?;
        for v in &set[1..] {
            acc += &unit(v)?;
        }
        Ok(acc / set.len() as f64)
    };
    let (ma, mb) = (mean(a)?, mean(b)?);
    if ma.len() != mb.len() {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    Ok(ma.dot(&mb))
}

/// Crop similarity of `edited` (crops inside `mask`) against the whole
/// `material` exemplar, both crop sizes pooled into one set per side.
pub fn crop_clip_similarity(edited: &ImageRGB, mask: &BinaryMask, material: &ImageRGB, embedder: &dyn ImageEmbedder, spec: &CropSpec) -> Result<f64> {
    let ec = extract_crops(edited, mask, spec)?;
    let full = BinaryMask::full(material.height(), material.width(), MaskResolution::Pixel);
    let mc = extract_crops(material, &full, spec)?;
    let ee = embedder.embed_batch(&ec.into_iter().map(|c| c.image).collect::<Vec<_>>())?;
    let me = embedder.embed_batch(&mc.into_iter().map(|c| c.image).collect::<Vec<_>>())?;
    mean_pairwise_cosine(&ee, &me)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> ImageRGB {
        ImageRGB::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y + 2 * x + 31 * c) % 97) as f32 / 96.0)).unwrap()
    }

    fn explicit_mean(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let mut sum = 0.0;
        for x in a {
            for y in b {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                sum += dot / (nx * ny);
            }
        }
        sum / (a.len() * b.len()) as f64
    }

    #[test]
    fn full_mask_grid_counts() {
        let img = gradient_image(512, 512);
        let full = BinaryMask::full(512, 512, MaskResolution::Pixel);
        let spec = |sizes: Vec<usize>, stride| CropSpec { sizes, stride };
        assert_eq!(extract_crops(&img, &full, &spec(vec![64], Some(64))).unwrap().len(), 64);
        assert_eq!(extract_crops(&img, &full, &spec(vec![64], None)).unwrap().len(), 15 * 15);
        assert_eq!(extract_crops(&img, &full, &spec(vec![128], None)).unwrap().len(), 7 * 7);
        assert_eq!(extract_crops(&img, &full, &CropSpec::default()).unwrap().len(), 225 + 49);
    }

    #[test]
    fn only_crops_inside_the_mask() {
        let img = gradient_image(256, 256);
        // 100x100 square at (40, 60): 64-crops at stride 32 fit only at (64, 64)
        let mask = BinaryMask::new(
            Array2::from_shape_fn((256, 256), |(y, x)| (40..140).contains(&y) && (60..160).contains(&x)),
            MaskResolution::Pixel,
        )
        .unwrap();
        let crops = extract_crops(&img, &mask, &CropSpec { sizes: vec![64], stride: None }).unwrap();
        assert_eq!(crops.iter().map(|c| (c.top, c.left)).collect::<Vec<_>>(), vec![(64, 64), (64, 96)]);
        let c = &crops[1];
        assert_eq!(c.image.pixels(), img.pixels().slice(ndarray::s![64..128, 96..160, ..]));
        let err = extract_crops(&img, &mask, &CropSpec { sizes: vec![128], stride: None }).unwrap_err();
        assert!(matches!(err, Error::MaskTooSmall { .. }));
    }

    #[test]
    fn small_mask_is_rejected() {
        let img = gradient_image(128, 128);
        let mask = BinaryMask::new(Array2::from_shape_fn((128, 128), |(y, x)| y < 63 && x < 100), MaskResolution::Pixel).unwrap();
        assert!(matches!(extract_crops(&img, &mask, &CropSpec::default()), Err(Error::MaskTooSmall { .. })));
        assert!(extract_crops(&img, &mask, &CropSpec { sizes: vec![256], stride: None }).is_err());
    }

    #[test]
    fn self_similarity_is_one() {
        let e = ToyEmbedder::new(0);
        let flat = ImageRGB::filled(256, 256, [0.8, 0.3, 0.1]).unwrap();
        let full = BinaryMask::full(256, 256, MaskResolution::Pixel);
        let s = crop_clip_similarity(&flat, &full, &flat, &e, &CropSpec::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-4, "{s}");
        // a textured image is only self-similar crop for crop
        let img = gradient_image(256, 256);
        let one = crop_clip_similarity(&img, &full, &img, &e, &CropSpec { sizes: vec![256], stride: None }).unwrap();
        assert!((one - 1.0).abs() < 1e-4);
        let many = crop_clip_similarity(&img, &full, &img, &e, &CropSpec::default()).unwrap();
        assert!(many < 1.0);
    }

    struct Basis;
    impl ImageEmbedder for Basis {
        fn name(&self) -> &str {
            "basis"
        }
        fn embed(&self, image: &ImageRGB) -> Result<Vec<f64>> {
            // red images map to e0, everything else to e1
            Ok(if image.mean_color()[0] > 0.5 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
        }
    }

    #[test]
    fn orthogonal_embeddings_score_zero() {
        let red = ImageRGB::filled(128, 128, [1.0, 0.0, 0.0]).unwrap();
        let blue = ImageRGB::filled(128, 128, [0.0, 0.0, 1.0]).unwrap();
        let full = BinaryMask::full(128, 128, MaskResolution::Pixel);
        assert_eq!(crop_clip_similarity(&red, &full, &blue, &Basis, &CropSpec::default()).unwrap(), 0.0);
        assert_eq!(crop_clip_similarity(&red, &full, &red, &Basis, &CropSpec::default()).unwrap(), 1.0);
    }

    #[test]
    fn three_by_two_matches_double_loop() {
        let a = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.3, 2.0], vec![0.0, 1.0, 1.0]];
        let b = vec![vec![0.2, -0.7, 1.0], vec![3.0, 0.1, 0.0]];
        assert!((mean_pairwise_cosine(&a, &b).unwrap() - explicit_mean(&a, &b)).abs() < 1e-12);
        assert!(mean_pairwise_cosine(&a, &[]).is_err());
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.1f64..2.0, 4), 1..n)
    }

    proptest! {
        #[test]
        fn pairwise_mean_matches_oracle(a in vecs(6), b in vecs(6)) {
            prop_assert!((mean_pairwise_cosine(&a, &b).unwrap() - explicit_mean(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn permutation_and_duplication_invariant(a in vecs(6), b in vecs(6), rot in 0usize..6) {
            let base = mean_pairwise_cosine(&a, &b).unwrap();
            let mut p = a.clone();
            p.rotate_left(rot % a.len());
            prop_assert!((mean_pairwise_cosine(&p, &b).unwrap() - base).abs() < 1e-12);
            let doubled: Vec<_> = a.iter().chain(a.iter()).cloned().collect();
            prop_assert!((mean_pairwise_cosine(&doubled, &b).unwrap() - base).abs() < 1e-12);
            // one extra duplicate moves the mean by at most the spread of pairwise scores
            let mut extra = a.clone();
            extra.push(a[0].clone());
            let scores: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| explicit_mean(std::slice::from_ref(x), std::slice::from_ref(y)))).collect();
            let spread = scores.iter().cloned().fold(f64::MIN, f64::max) - scores.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert!((mean_pairwise_cosine(&extra, &b).unwrap() - base).abs() <= spread + 1e-12);
        }
    }
}
