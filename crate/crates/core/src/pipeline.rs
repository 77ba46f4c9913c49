//! End-to-end material transfer: inversion, guided sampling with material
//! conditioning, dual masking and decoding.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::conditioning::LambdaSchedule;
use crate::config::TransferConfig;
use crate::denoiser::{BackendManifest, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{cfg, combine_noise, guidance_gradient, noise_rescale};
use crate::image::ImageRGB;
use crate::latent::{InversionTrajectory, LatentState, PromptSet};
use crate::mask::{downsample_mask, mask_pyramid, BinaryMask, MaskResolution};
use crate::sampler::{self, ddim_step, NoiseSchedule};

#[derive(Debug, Clone)]
pub struct TransferRequest {
    pub x_init: ImageRGB,
    /// Pixel-space object mask.
    pub object_mask: BinaryMask,
    pub y_im: ImageRGB,
    pub prompts: PromptSet,
    pub config: TransferConfig,
}

impl TransferRequest {
    pub fn new(x_init: ImageRGB, object_mask: BinaryMask, y_im: ImageRGB, prompts: PromptSet, config: TransferConfig) -> Result<Self> {
        let req = Self {
            x_init,
            object_mask,
            y_im,
            prompts,
            config,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.x_init.ensure_latent_compatible()?;
        if self.object_mask.is_empty() {
            return Err(Error::Mask("mask empty".into()));
        }
        if self.object_mask.dims() != self.x_init.dims() {
            return Err(Error::Mask(format!(
                "mask is {:?} but image is {:?}",
                self.object_mask.dims(),
                self.x_init.dims()
            )));
        }
        if self.prompts.y_src.trim().is_empty() {
            return Err(Error::Invalid("source prompt must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inverting,
    Sampling,
}

/// Progress hooks of a running transfer. `cancelled` is polled at every
/// step boundary.
pub trait TransferObserver {
    fn phase(&mut self, _phase: Phase) {}
    fn inversion_step(&mut self, _done: usize, _total: usize) {}
    fn step(&mut self, _record: &StepRecord) {}
    fn preview(&mut self, _step: usize, _image: &ImageRGB) {}
    fn cancelled(&self) -> bool {
        false
    }
}

pub struct NoopObserver;

impl TransferObserver for NoopObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Decode a preview every this many sampling steps; 0 disables.
    pub preview_every: usize,
    pub lambda_schedule: LambdaSchedule,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            preview_every: 10,
            lambda_schedule: LambdaSchedule::Constant,
        }
    }
}

/// Log line of one sampling step. Energies are absent outside the
/// guidance window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based sampling step, `T - t + 1`.
    pub step: usize,
    /// DDIM index before the step.
    pub t: usize,
    pub lambda: f64,
    pub g_self: Option<f64>,
    pub g_feat: Option<f64>,
    pub r_cur: Option<f64>,
    pub gamma: Option<f64>,
    pub guided: bool,
    pub blended: bool,
    /// Forward noise predictions made in this step.
    pub passes: usize,
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub x_edit: ImageRGB,
    pub final_latent: LatentState,
    pub steps: Vec<StepRecord>,
    pub config: TransferConfig,
    pub backend: BackendManifest,
    /// Forward predictions over the sampling loop (inversion excluded).
    pub backend_passes: usize,
}

/// `mask * z + (1 - mask) * z_star` per channel. Cells are selected, not
/// mixed, so unmasked cells copy `z_star` bit-exactly.
pub fn blend_background(z: &LatentState, z_star: &LatentState, latent_mask: &BinaryMask) -> Result<LatentState> {
    if z.t != z_star.t {
        return Err(Error::Invalid(format!("blend of misaligned latents: t = {} vs t* = {}", z.t, z_star.t)));
    }
    let (c, h, w) = z.shape();
    if z_star.shape() != (c, h, w) || latent_mask.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "blend shapes: z {:?}, z* {:?}, mask {:?}",
            z.shape(),
            z_star.shape(),
            latent_mask.dims()
        )));
    }
    let mask = latent_mask.values();
    let mut out = z_star.data.clone();
    for (mut o, s) in out.outer_iter_mut().zip(z.data.outer_iter()) {
        Zip::from(&mut o).and(&s).and(mask).for_each(|o, s, m| {
            if *m {
                *o = *s;
            }
        });
    }
    Ok(LatentState::new(out, z.t))
}

/// Latent mask and per-level attention masks for `req` on `backend`.
pub fn prepare_masks(object_mask: &BinaryMask, manifest: &BackendManifest) -> Result<(BinaryMask, Vec<BinaryMask>)> {
    let [_, h, w] = manifest.latent_shape;
    let latent = downsample_mask(object_mask, (h, w), MaskResolution::Latent)?;
    let levels = mask_pyramid(object_mask, &manifest.cross_attention_levels())?;
    if latent.is_empty() || levels.iter().any(BinaryMask::is_empty) {
        return Err(Error::Mask("mask empty".into()));
    }
    Ok((latent, levels))
}

/// Runs the full transfer with default options and no observer.
pub fn material_transfer(req: &TransferRequest, backend: &dyn Denoiser) -> Result<TransferResult> {
    material_transfer_with(req, backend, &RunOptions::default(), &mut NoopObserver, None)
}

/// Inverts `req.x_init` under the source prompt, reporting progress.
pub fn invert_request(req: &TransferRequest, backend: &dyn Denoiser, observer: &mut dyn TransferObserver) -> Result<InversionTrajectory> {
    let schedule = NoiseSchedule::scaled_linear(req.config.steps)?;
    let total = schedule.steps();
    observer.phase(Phase::Inverting);
    sampler::ddim_invert_with(&req.x_init, &req.prompts.y_src, backend, &schedule, &mut |done| {
        observer.inversion_step(done, total);
        if observer.cancelled() {
            return Err(Error::Cancelled { step: 0 });
        }
        Ok(())
    })
}

/// Full transfer. A supplied `trajectory` must come from inverting
/// `req.x_init` under `req.prompts.y_src` with `req.config.steps` steps.
pub fn material_transfer_with(
    req: &TransferRequest,
    backend: &dyn Denoiser,
    opts: &RunOptions,
    observer: &mut dyn TransferObserver,
    trajectory: Option<&InversionTrajectory>,
) -> Result<TransferResult> {
    req.validate()?;
    let manifest = backend.manifest();
    let [ih, iw] = manifest.image_size;
    if req.x_init.dims() != (ih, iw) {
        return Err(Error::Shape(format!("image {:?} does not match backend input {ih}x{iw}", req.x_init.dims())));
    }
    let cfg_ = &req.config;
    let (latent_mask, level_masks) = prepare_masks(&req.object_mask, manifest)?;
    let level_masks = Arc::new(level_masks);
    let material = Arc::new(backend.embed_material(&req.y_im)?);
    let schedule = NoiseSchedule::scaled_linear(cfg_.steps)?;

    let owned;
    let traj = match trajectory {
        Some(t) => {
            if t.steps() != cfg_.steps || t.y_src != req.prompts.y_src {
                return Err(Error::Invalid(format!(
                    "cached trajectory ({} steps, source prompt {:?}) does not match the request",
                    t.steps(),
                    t.y_src
                )));
            }
            t
        }
        None => {
            owned = invert_request(req, backend, observer)?;
            &owned
        }
    };
    if traj.at(0).shape() != (manifest.latent_shape[0], manifest.latent_shape[1], manifest.latent_shape[2]) {
        return Err(Error::Shape("trajectory latents do not match backend latent shape".into()));
    }

    observer.phase(Phase::Sampling);
    let total = cfg_.steps;
    let mut z = traj.at(total).clone();
    let mut records = Vec::with_capacity(total);
    let mut backend_passes = 0;
    for t in (1..=total).rev() {
        let elapsed = cfg_.steps_elapsed(t);
        if observer.cancelled() {
            return Err(Error::Cancelled { step: elapsed });
        }
        let timestep = schedule.timestep(t);
        let lambda = opts.lambda_schedule.at(cfg_.lam, elapsed);
        let cond = Conditioning::TextImage {
            prompt: req.prompts.y_trg.clone(),
            material: material.clone(),
            lambda,
            masks: level_masks.clone(),
        };
        let eps_c = backend.predict_noise(&z, timestep, &cond, false)?.noise;
        let eps_u = backend.predict_noise(&z, timestep, &Conditioning::Null, false)?.noise;
        let mut passes = 2;
        let mut rec = StepRecord {
            step: elapsed + 1,
            t,
            lambda,
            g_self: None,
            g_feat: None,
            r_cur: None,
            gamma: None,
            guided: false,
            blended: false,
            passes: 0,
        };
        let eps_final = if cfg_.guidance_active(t) {
            let g = guidance_gradient(&z, traj.at(t), &req.prompts.y_src, backend, timestep, cfg_.v_self, cfg_.v_feat)?;
            passes += 2;
            let delta = (&eps_c - &eps_u) * cfg_.w;
            let rs = noise_rescale(&delta, &g.grad, cfg_.r_lower, cfg_.r_upper);
            rec.g_self = Some(g.g_self);
            rec.g_feat = Some(g.g_feat);
            rec.r_cur = Some(rs.r_cur);
            rec.gamma = Some(rs.gamma);
            rec.guided = true;
            combine_noise(&eps_c, &eps_u, &g.grad, cfg_.w, rs.gamma, elapsed, cfg_.tau_g)?
        } else {
            cfg(&eps_c, &eps_u, cfg_.w)?
        };
        let mut next = ddim_step(&z, &eps_final, &schedule)?;
        if cfg_.blending_active(t) {
            next = blend_background(&next, traj.at(t - 1), &latent_mask)?;
            rec.blended = true;
        }
        if !next.is_finite() {
            return Err(Error::NonFinite { step: elapsed + 1 });
        }
        rec.passes = passes;
        backend_passes += passes;
        z = next;
        observer.step(&rec);
        records.push(rec);
        if opts.preview_every > 0 && (elapsed + 1).is_multiple_of(opts.preview_every) && t > 1 {
            observer.preview(elapsed + 1, &backend.decode(&z)?);
        }
    }
    let x_edit = backend.decode(&z)?;
    Ok(TransferResult {
        x_edit,
        final_latent: z,
        steps: records,
        config: *cfg_,
        backend: manifest.clone(),
        backend_passes,
    })
}

/// One transfer per force in `lambdas`, sharing a single inversion.
pub fn lambda_sweep(req: &TransferRequest, backend: &dyn Denoiser, lambdas: &[f64]) -> Result<Vec<TransferResult>> {
    if lambdas.is_empty() {
        return Err(Error::Invalid("empty lambda list".into()));
    }
    let traj = invert_request(req, backend, &mut NoopObserver)?;
    lambdas
        .iter()
        .map(|&lam| {
            let mut r = req.clone();
            r.config.lam = lam;
            material_transfer_with(&r, backend, &RunOptions::default(), &mut NoopObserver, Some(&traj))
        })
        .collect()
}

/// Content-addressed store of inversion trajectories, one directory per key.
#[derive(Debug, Clone)]
pub struct TrajectoryCache {
    root: PathBuf,
}

impl TrajectoryCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(req: &TransferRequest, backend: &dyn Denoiser) -> String {
        sampler::trajectory_key(&req.x_init, &req.prompts.y_src, req.config.steps, backend)
    }

    pub fn dir_for(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    /// Loads the trajectory for `req` if cached; otherwise inverts and
    /// stores it. Returns the trajectory, its key and whether it was a hit.
    pub fn get_or_invert(
        &self,
        req: &TransferRequest,
        backend: &dyn Denoiser,
        observer: &mut dyn TransferObserver,
    ) -> Result<(InversionTrajectory, String, bool)> {
        let key = Self::key(req, backend);
        let dir = self.dir_for(&key);
        if dir.join("meta.json").is_file() {
            match sampler::load_trajectory(&dir) {
                Ok((traj, meta)) if meta.key == key => return Ok((traj, key, true)),
                Ok(_) => log::warn!("trajectory cache entry {} has a stale key, recomputing", dir.display()),
                Err(e) => log::warn!("unreadable trajectory cache entry {}: {e}", dir.display()),
            }
        }
        let traj = invert_request(req, backend, observer)?;
        let schedule = NoiseSchedule::scaled_linear(req.config.steps)?;
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let tmp = self.root.join(format!(".{key}.{}", uuid::Uuid::new_v4()));
        sampler::save_trajectory(&tmp, &traj, &schedule, &backend.manifest().name, &key)?;
        if std::fs::rename(&tmp, &dir).is_err() {
            // another writer won the race; its entry is equivalent
            let _ = std::fs::remove_dir_all(&tmp);
        }
        Ok((traj, key, false))
    }
}

/// Reproducibility record written as `manifest.json` in a run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TransferConfig,
    pub prompts: PromptSet,
    pub backend: BackendManifest,
    pub lambda_schedule: LambdaSchedule,
    pub trajectory_key: Option<String>,
    pub status: String,
    pub backend_passes: Option<usize>,
}

/// Run directory: `inputs/`, `trajectory/`, `previews/`, `steps.csv`,
/// `result.png`, `manifest.json`.
pub struct RunDir {
    root: PathBuf,
    steps: csv::Writer<File>,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates the directory and copies the inputs. An existing non-empty
    /// directory is refused unless `overwrite` is set.
    pub fn create(root: impl Into<PathBuf>, req: &TransferRequest, backend: &BackendManifest, opts: &RunOptions, overwrite: bool) -> Result<Self> {
        let root = root.into();
        ensure_writable_dir(&root, overwrite)?;
        let inputs = root.join("inputs");
        std::fs::create_dir_all(&inputs).map_err(|e| Error::io(&inputs, e))?;
        req.x_init.save_png(inputs.join("image.png"))?;
        req.object_mask.save_png(inputs.join("mask.png"))?;
        req.y_im.save_png(inputs.join("material.png"))?;
        let prompts = inputs.join("prompts.json");
        std::fs::write(&prompts, serde_json::to_vec_pretty(&req.prompts)?).map_err(|e| Error::io(&prompts, e))?;
        let steps_path = root.join("steps.csv");
        let steps = csv::Writer::from_path(&steps_path).map_err(|e| Error::Invalid(format!("{}: {e}", steps_path.display())))?;
        let manifest = RunManifest {
            config: req.config,
            prompts: req.prompts.clone(),
            backend: backend.clone(),
            lambda_schedule: opts.lambda_schedule,
            trajectory_key: None,
            status: "running".into(),
            backend_passes: None,
        };
        let dir = Self { root, steps, manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn result_path(&self) -> PathBuf {
        self.root.join("result.png")
    }

    pub fn write_trajectory(&mut self, traj: &InversionTrajectory, key: &str) -> Result<()> {
        let schedule = NoiseSchedule::scaled_linear(traj.steps())?;
        sampler::save_trajectory(&self.root.join("trajectory"), traj, &schedule, &self.manifest.backend.name, key)?;
        self.manifest.trajectory_key = Some(key.to_string());
        self.write_manifest()
    }

    /// Appends one row to `steps.csv` and flushes it.
    pub fn record_step(&mut self, rec: &StepRecord) -> Result<()> {
        let path = self.root.join("steps.csv");
        self.steps.serialize(rec).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        self.steps.flush().map_err(|e| Error::io(&path, e))
    }

    /// Writes `previews/step_NNN.png` and publishes it as `preview.png` by
    /// rename, so readers never see a partial file.
    pub fn write_preview(&self, step: usize, image: &ImageRGB) -> Result<PathBuf> {
        let dir = self.root.join("previews");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("step_{step:03}.png"));
        image.save_png(&path)?;
        let tmp = self.root.join(".preview.png.tmp");
        image.save_png(&tmp)?;
        let latest = self.root.join("preview.png");
        std::fs::rename(&tmp, &latest).map_err(|e| Error::io(&latest, e))?;
        Ok(path)
    }

    pub fn finish(&mut self, result: &TransferResult) -> Result<PathBuf> {
        let path = self.result_path();
        let tmp = self.root.join(".result.png.tmp");
        result.x_edit.save_png(&tmp)?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.manifest.status = "done".into();
        self.manifest.backend_passes = Some(result.backend_passes);
        self.write_manifest()?;
        Ok(path)
    }

    pub fn mark(&mut self, status: &str) -> Result<()> {
        self.manifest.status = status.to_string();
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.root.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(&path, e))
    }
}

/// Creates `dir`; refuses an existing non-empty directory unless `overwrite`.
pub fn ensure_writable_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::Invalid(format!("{} exists and is not empty (use --force to overwrite)", dir.display())));
        }
        if non_empty {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Observer that streams steps and previews into a [`RunDir`].
pub struct RunDirObserver<'a> {
    pub dir: &'a mut RunDir,
    pub error: Option<Error>,
}

impl TransferObserver for RunDirObserver<'_> {
    fn step(&mut self, record: &StepRecord) {
        if let Err(e) = self.dir.record_step(record) {
            self.error.get_or_insert(e);
        }
    }

    fn preview(&mut self, step: usize, image: &ImageRGB) {
        if let Err(e) = self.dir.write_preview(step, image) {
            self.error.get_or_insert(e);
        }
    }
}
