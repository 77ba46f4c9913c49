//! Dataset manifests, per-method evaluation and scatter reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::crops::{crop_clip_similarity, CropSpec, ImageEmbedder};
use super::lpips::Lpips;
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::mask::BinaryMask;

/// Crop-similarity boundaries of the scatter zones.
pub const CLIP_LOW: f64 = 0.82;
pub const CLIP_HIGH: f64 = 0.84;
/// LPIPS boundary of the scatter zones.
pub const LPIPS_MAX: f64 = 0.21;

/// One object/material pair. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub object_image: PathBuf,
    pub mask: PathBuf,
    pub material_image: PathBuf,
    pub y_src: String,
    pub y_trg: String,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl DatasetEntry {
    /// Explicit id, else `<object stem>__<material stem>`.
    pub fn id(&self) -> String {
        self.id
            .clone()
            .unwrap_or_else(|| format!("{}__{}", stem(&self.object_image), stem(&self.material_image)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetCounts {
    pub entries: usize,
    pub objects: usize,
    pub materials: usize,
}

impl DatasetManifest {
    /// Parses JSON lines; blank lines are skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: DatasetEntry = serde_json::from_str(line).map_err(|e| Error::Invalid(format!("manifest line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        let m = Self { root: root.into(), entries };
        let mut ids = BTreeSet::new();
        if let Some(dup) = m.entries.iter().map(DatasetEntry::id).find(|id| !ids.insert(id.clone())) {
            return Err(Error::Invalid(format!("duplicate manifest entry id {dup}")));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Checks that every referenced file exists and every mask is nonempty.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.object_image, &e.mask, &e.material_image] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Invalid(format!("entry {}: missing file {}", e.id(), full.display())));
                }
            }
            if BinaryMask::load(self.resolve(&e.mask))?.is_empty() {
                return Err(Error::Mask(format!("entry {}: mask empty", e.id())));
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> DatasetCounts {
        let objects: BTreeSet<_> = self.entries.iter().map(|e| &e.object_image).collect();
        let materials: BTreeSet<_> = self.entries.iter().map(|e| &e.material_image).collect();
        DatasetCounts {
            entries: self.entries.len(),
            objects: objects.len(),
            materials: materials.len(),
        }
    }
}

/// A directory of result images named `<entry id>.png` (or `.jpg`).
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResults {
    pub method: String,
    pub lambda: Option<f64>,
    pub dir: PathBuf,
}

impl MethodResults {
    /// Parses `label[@lambda]=dir`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (label, dir) = spec
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("results spec {spec:?} must look like label[@lambda]=dir")))?;
        let (method, lambda) = match label.split_once('@') {
            Some((m, l)) => (
                m,
                Some(l.parse::<f64>().map_err(|_| Error::Invalid(format!("bad lambda {l:?} in {spec:?}")))?),
            ),
            None => (label, None),
        };
        if method.is_empty() || dir.is_empty() {
            return Err(Error::Invalid(format!("results spec {spec:?} must look like label[@lambda]=dir")));
        }
        Ok(Self {
            method: method.to_string(),
            lambda,
            dir: PathBuf::from(dir),
        })
    }

    pub fn find(&self, id: &str) -> Option<PathBuf> {
        ["png", "jpg", "jpeg"].iter().map(|ext| self.dir.join(format!("{id}.{ext}"))).find(|p| p.is_file())
    }
}

/// Scores of one method on one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryScore {
    pub method: String,
    pub lambda: Option<f64>,
    pub entry: String,
    pub clip_score: f64,
    pub lpips: f64,
}

/// Per-method mean scores: one scatter point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub lambda: Option<f64>,
    pub clip_score: f64,
    pub lpips: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    /// Crop similarity above the low boundary with LPIPS below its boundary.
    Favorable,
    WeakTransfer,
    PoorPreservation,
}

impl EvalRecord {
    pub fn is_favorable(&self) -> bool {
        self.clip_score > CLIP_LOW && self.lpips < LPIPS_MAX
    }

    pub fn zone(&self) -> Zone {
        if self.is_favorable() {
            Zone::Favorable
        } else if self.lpips >= LPIPS_MAX {
            Zone::PoorPreservation
        } else {
            Zone::WeakTransfer
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub method: String,
    pub entry: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EntryScore>,
    pub records: Vec<EvalRecord>,
    pub skipped: Vec<Skipped>,
    pub embedder: String,
    pub perceptual: String,
    pub crop_sizes: Vec<usize>,
    pub crop_stride: Option<usize>,
    pub dataset: DatasetCounts,
}

#[derive(Serialize)]
struct Zones {
    clip_low: f64,
    clip_high: f64,
    lpips_max: f64,
}

const ZONES: Zones = Zones {
    clip_low: CLIP_LOW,
    clip_high: CLIP_HIGH,
    lpips_max: LPIPS_MAX,
};

impl EvalReport {
    /// Scatter points in the favorable zone.
    pub fn favorable_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_favorable()).count()
    }

    /// Writes `report.csv`, `summary.json`, `scatter.json` and `scatter.csv`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_err = |p: &Path, e: csv::Error| Error::Invalid(format!("{}: {e}", p.display()));

        let report = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&report).map_err(|e| csv_err(&report, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(&report, e))?;
        }
        w.flush().map_err(|e| Error::io(&report, e))?;

        let summary = dir.join("summary.json");
        let body = serde_json::json!({
            "methods": self.records,
            "skipped": self.skipped,
            "skipped_count": self.skipped.len(),
            "favorable_count": self.favorable_count(),
            "zones": ZONES,
            "embedder": self.embedder,
            "perceptual": self.perceptual,
            "crop_sizes": self.crop_sizes,
            "crop_stride": self.crop_stride,
            "dataset": self.dataset,
        });
        std::fs::write(&summary, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&summary, e))?;

        let points: Vec<_> = self
            .records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "method": r.method, "lambda": r.lambda, "clip_score": r.clip_score,
                    "lpips": r.lpips, "zone": r.zone(),
                })
            })
            .collect();
        let scatter = dir.join("scatter.json");
        let body = serde_json::json!({ "x": "clip_score", "y": "lpips", "zones": ZONES, "points": points });
        std::fs::write(&scatter, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&scatter, e))?;

        let scatter_csv = dir.join("scatter.csv");
        let mut w = csv::Writer::from_path(&scatter_csv).map_err(|e| csv_err(&scatter_csv, e))?;
        w.write_record(["method", "lambda", "clip_score", "lpips", "zone"]).map_err(|e| csv_err(&scatter_csv, e))?;
        for r in &self.records {
            let zone = serde_json::to_value(r.zone())?.as_str().unwrap_or_default().to_string();
            w.write_record([
                r.method.clone(),
                r.lambda.map(|l| l.to_string()).unwrap_or_default(),
                r.clip_score.to_string(),
                r.lpips.to_string(),
                zone,
            ])
            .map_err(|e| csv_err(&scatter_csv, e))?;
        }
        w.flush().map_err(|e| Error::io(&scatter_csv, e))?;
        Ok(vec![report, summary, scatter, scatter_csv])
    }
}

fn score_entry(
    manifest: &DatasetManifest,
    entry: &DatasetEntry,
    result_path: &Path,
    lpips: &Lpips,
    embedder: &dyn ImageEmbedder,
    spec: &CropSpec,
) -> Result<(f64, f64)> {
    let original = ImageRGB::load(manifest.resolve(&entry.object_image))?;
    let mask = BinaryMask::load(manifest.resolve(&entry.mask))?;
    let material = ImageRGB::load(manifest.resolve(&entry.material_image))?;
    let mut edited = ImageRGB::load(result_path)?;
    if edited.dims() != original.dims() {
        log::warn!("{}: resizing {:?} result to {:?}", result_path.display(), edited.dims(), original.dims());
        edited = edited.resize(original.height(), original.width());
    }
    if mask.is_empty() {
        return Err(Error::Mask("mask empty".into()));
    }
    let d = lpips.distance(&edited, &original)?;
    let c = crop_clip_similarity(&edited, &mask, &material, embedder, spec)?;
    Ok((c, d))
}

/// Scores every method on every manifest entry and averages per method.
/// Entries without a result image, or whose scoring fails, are skipped
/// with a warning and listed in the report.
pub fn evaluate_dataset(
    manifest: &DatasetManifest,
    methods: &[MethodResults],
    lpips: &Lpips,
    embedder: &dyn ImageEmbedder,
    spec: &CropSpec,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::Invalid("no results directories given".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for m in methods {
        for e in &manifest.entries {
            let id = e.id();
            let skip = |reason: String| Skipped {
                method: m.method.clone(),
                entry: id.clone(),
                reason,
            };
            let Some(path) = m.find(&id) else {
                log::warn!("{}: no result for entry {id} in {}", m.method, m.dir.display());
                skipped.push(skip("missing result image".into()));
                continue;
            };
            match score_entry(manifest, e, &path, lpips, embedder, spec) {
                Ok((clip_score, lp)) => rows.push(EntryScore {
                    method: m.method.clone(),
                    lambda: m.lambda,
                    entry: id.clone(),
                    clip_score,
                    lpips: lp,
                }),
                Err(err) => {
                    log::warn!("{}: entry {id} skipped: {err}", m.method);
                    skipped.push(skip(err.to_string()));
                }
            }
        }
    }
    // group by (method, lambda) in input order
    let mut order: Vec<(String, Option<u64>)> = Vec::new();
    let mut groups: BTreeMap<(String, Option<u64>), Vec<&EntryScore>> = BTreeMap::new();
    for r in &rows {
        let key = (r.method.clone(), r.lambda.map(f64::to_bits));
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let records = order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let n = g.len() as f64;
            EvalRecord {
                method: key.0.clone(),
                lambda: key.1.map(f64::from_bits),
                clip_score: g.iter().map(|r| r.clip_score).sum::<f64>() / n,
                lpips: g.iter().map(|r| r.lpips).sum::<f64>() / n,
                entries: g.len(),
            }
        })
        .collect();
    Ok(EvalReport {
        rows,
        records,
        skipped,
        embedder: embedder.name().to_string(),
        perceptual: lpips.label().to_string(),
        crop_sizes: spec.sizes.clone(),
        crop_stride: spec.stride,
        dataset: manifest.counts(),
    })
}
