//! Quantitative evaluation: perceptual distance, crop similarity and
//! dataset-level scatter reports.

mod crops;
mod dataset;
mod lpips;

pub use crops::{crop_clip_similarity, extract_crops, mean_pairwise_cosine, Crop, CropSpec, ImageEmbedder, ToyEmbedder, DEFAULT_CROP_SIZES};
pub use dataset::{
    evaluate_dataset, DatasetCounts, DatasetEntry, DatasetManifest, EntryScore, EvalRecord, EvalReport, MethodResults, Skipped, Zone, CLIP_HIGH,
    CLIP_LOW, LPIPS_MAX,
};
pub use lpips::{Lpips, LPIPS_WEIGHTS_ENV, LPIPS_WEIGHTS_FILE};

/// Perceptual distance between `a` and `b` under `net`.
pub fn lpips_distance(a: &crate::image::ImageRGB, b: &crate::image::ImageRGB, net: &Lpips) -> crate::error::Result<f64> {
    net.distance(a, b)
}

#[cfg(feature = "pretrained")]
mod clip;

#[cfg(feature = "pretrained")]
pub use clip::ClipEmbedder;

/// Loads the CLIP image embedder from `weights_dir` (or `$MATFUSE_WEIGHTS_DIR`).
#[cfg(feature = "pretrained")]
pub fn load_clip_embedder(weights_dir: Option<&std::path::Path>) -> crate::error::Result<Box<dyn ImageEmbedder>> {
    Ok(Box::new(ClipEmbedder::load(weights_dir)?))
}

#[cfg(not(feature = "pretrained"))]
pub fn load_clip_embedder(_weights_dir: Option<&std::path::Path>) -> crate::error::Result<Box<dyn ImageEmbedder>> {
    Err(crate::error::Error::BackendLoad {
        component: "CLIP image embedder".into(),
        reason: "this build does not include the `pretrained` feature".into(),
    })
}
