//! Deterministic (eta = 0) DDIM inversion and sampling over any backend.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::latent::{InversionTrajectory, LatentState};

pub const TRAIN_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `beta` linear in sqrt-space between `beta_start` and `beta_end`.
    ScaledLinear { beta_start: f64, beta_end: f64, train_steps: usize },
    Custom,
}

/// Cumulative alphas of the training schedule plus the `T` timesteps
/// selected for DDIM. DDIM index `t` in `1..=T` maps to native timestep
/// `timesteps[t - 1]`; index 0 is the clean latent with alpha = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    #[serde(skip)]
    alphas_cumprod: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// The SD v1.x schedule with `steps` uniformly strided DDIM timesteps.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let n = TRAIN_TIMESTEPS;
        let (s0, s1) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut alphas = Vec::with_capacity(n);
        let mut acc = 1.0;
        for i in 0..n {
            let b = s0 + (s1 - s0) * i as f64 / (n - 1) as f64;
            acc *= 1.0 - b * b;
            alphas.push(acc);
        }
        let mut s = Self::from_alphas(alphas, steps)?;
        s.kind = ScheduleKind::ScaledLinear {
            beta_start: BETA_START,
            beta_end: BETA_END,
            train_steps: n,
        };
        Ok(s)
    }

    /// Custom cumulative alphas in `(0, 1]`, non-increasing.
    pub fn from_alphas(alphas_cumprod: Vec<f64>, steps: usize) -> Result<Self> {
        let n = alphas_cumprod.len();
        if steps == 0 || steps > n {
            return Err(Error::Invalid(format!("DDIM steps must lie in [1, {n}], got {steps}")));
        }
        if alphas_cumprod.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Invalid("cumulative alphas must lie in (0, 1]".into()));
        }
        if alphas_cumprod.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Invalid("cumulative alphas must be non-increasing".into()));
        }
        let stride = n / steps;
        let offset = usize::from(stride > 1);
        let timesteps = (0..steps).map(|i| i * stride + offset).collect();
        Ok(Self {
            kind: ScheduleKind::Custom,
            alphas_cumprod,
            timesteps,
        })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Native timestep of DDIM index `t >= 1`.
    pub fn timestep(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }

    /// Cumulative alpha at DDIM index `t`.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[self.timestep(t)]
        }
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

/// Moves `z` from cumulative alpha `a_from` to `a_to` along the DDIM ODE
/// with noise estimate `eps`.
fn transfer(z: &Array3<f64>, eps: &Array3<f64>, a_from: f64, a_to: f64) -> Array3<f64> {
    let x0_coef = 1.0 / a_from.sqrt();
    let eps_coef = (1.0 - a_from).sqrt();
    let mut out = (z - &(eps * eps_coef)) * (x0_coef * a_to.sqrt());
    out.scaled_add((1.0 - a_to).sqrt(), eps);
    out
}

/// One sampling step from index `t` to `t - 1` using `eps_final`.
pub fn ddim_step(z: &LatentState, eps_final: &Array3<f64>, schedule: &NoiseSchedule) -> Result<LatentState> {
    if z.t == 0 {
        return Err(Error::Invalid("cannot step below t = 0".into()));
    }
    if z.t > schedule.steps() {
        return Err(Error::Invalid(format!("t = {} beyond schedule of {} steps", z.t, schedule.steps())));
    }
    if eps_final.dim() != z.data.dim() {
        return Err(Error::Shape("noise estimate differs from latent shape".into()));
    }
    let data = transfer(&z.data, eps_final, schedule.alpha(z.t), schedule.alpha(z.t - 1));
    Ok(LatentState::new(data, z.t - 1))
}

/// One inversion step from index `t` to `t + 1` using `eps`.
pub fn ddim_inversion_step(z: &LatentState, eps: &Array3<f64>, schedule: &NoiseSchedule) -> Result<LatentState> {
    if z.t >= schedule.steps() {
        return Err(Error::Invalid(format!("cannot invert beyond t = {}", schedule.steps())));
    }
    if eps.dim() != z.data.dim() {
        return Err(Error::Shape("noise estimate differs from latent shape".into()));
    }
    let data = transfer(&z.data, eps, schedule.alpha(z.t), schedule.alpha(z.t + 1));
    Ok(LatentState::new(data, z.t + 1))
}

pub fn encode(backend: &dyn Denoiser, x: &ImageRGB) -> Result<LatentState> {
    backend.encode(x)
}

pub fn decode(backend: &dyn Denoiser, z: &LatentState) -> Result<ImageRGB> {
    backend.decode(z)
}

/// Inverts `x_init` under the unguided conditional prediction for `y_src`.
pub fn ddim_invert(x_init: &ImageRGB, y_src: &str, backend: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<InversionTrajectory> {
    ddim_invert_with(x_init, y_src, backend, schedule, &mut |_| Ok(()))
}

/// [`ddim_invert`] with a callback after each step (receives the new index);
/// an error from the callback aborts the inversion.
pub fn ddim_invert_with(
    x_init: &ImageRGB,
    y_src: &str,
    backend: &dyn Denoiser,
    schedule: &NoiseSchedule,
    on_step: &mut dyn FnMut(usize) -> Result<()>,
) -> Result<InversionTrajectory> {
    let z0 = backend.encode(x_init)?;
    invert_latent(z0, y_src, backend, schedule, on_step)
}

pub fn invert_latent(
    z0: LatentState,
    y_src: &str,
    backend: &dyn Denoiser,
    schedule: &NoiseSchedule,
    on_step: &mut dyn FnMut(usize) -> Result<()>,
) -> Result<InversionTrajectory> {
    let cond = Conditioning::text(y_src);
    let mut latents = Vec::with_capacity(schedule.steps() + 1);
    latents.push(LatentState::new(z0.data, 0));
    for t in 0..schedule.steps() {
        let z = &latents[t];
        // the noise estimate for the move t -> t+1 is taken at the target timestep
        let eps = backend.predict_noise(z, schedule.timestep(t + 1), &cond, false)?.noise;
        let next = ddim_inversion_step(z, &eps, schedule)?;
        if !next.is_finite() {
            return Err(Error::NonFinite { step: t + 1 });
        }
        latents.push(next);
        on_step(t + 1)?;
    }
    InversionTrajectory::new(latents, y_src.to_string())
}

/// Plain DDIM sampling from `z` down to index 0 under a single conditioning.
pub fn ddim_sample(z: &LatentState, cond: &Conditioning, backend: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<LatentState> {
    let mut z = z.clone();
    while z.t > 0 {
        let eps = backend.predict_noise(&z, schedule.timestep(z.t), cond, false)?.noise;
        z = ddim_step(&z, &eps, schedule)?;
    }
    Ok(z)
}

/// Metadata stored next to a cached trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    #[serde(rename = "T")]
    pub steps: usize,
    pub y_src: String,
    pub latent_shape: [usize; 3],
    pub schedule: ScheduleKind,
    pub timesteps: Vec<usize>,
    pub backend: String,
    pub key: String,
}

/// Content key of an inversion: source pixels, prompt, step count and backend.
pub fn trajectory_key(x_init: &ImageRGB, y_src: &str, steps: usize, backend: &dyn Denoiser) -> String {
    let mut h = Sha256::new();
    for v in x_init.pixels().iter() {
        h.update(v.to_le_bytes());
    }
    h.update((x_init.height() as u64).to_le_bytes());
    h.update((x_init.width() as u64).to_le_bytes());
    h.update(y_src.as_bytes());
    h.update([0]);
    h.update((steps as u64).to_le_bytes());
    h.update(serde_json::to_vec(backend.manifest()).expect("manifest serializes"));
    hex::encode(h.finalize())
}

const LATENTS_FILE: &str = "latents.npy";
const META_FILE: &str = "meta.json";

/// Writes `latents.npy` (`(T+1) x C x h x w`, f64) and `meta.json` into `dir`.
pub fn save_trajectory(dir: &Path, traj: &InversionTrajectory, schedule: &NoiseSchedule, backend: &str, key: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = traj.at(0).shape();
    let mut stacked = Array4::<f64>::zeros((traj.len(), c, h, w));
    for (mut slot, z) in stacked.axis_iter_mut(Axis(0)).zip(traj.latents()) {
        slot.assign(&z.data);
    }
    let path = dir.join(LATENTS_FILE);
    ndarray_npy::write_npy(&path, &stacked).map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))?;
    let meta = TrajectoryMeta {
        steps: traj.steps(),
        y_src: traj.y_src.clone(),
        latent_shape: [c, h, w],
        schedule: schedule.kind.clone(),
        timesteps: schedule.timesteps.clone(),
        backend: backend.to_string(),
        key: key.to_string(),
    };
    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

pub fn load_trajectory(dir: &Path) -> Result<(InversionTrajectory, TrajectoryMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TrajectoryMeta = serde_json::from_str(&text)?;
    let path = dir.join(LATENTS_FILE);
    let stacked: Array4<f64> =
        ndarray_npy::read_npy(&path).map_err(|e| Error::Invalid(format!("reading {}: {e}", path.display())))?;
    if stacked.len_of(Axis(0)) != meta.steps + 1 {
        return Err(Error::Invalid(format!("{} holds {} latents, expected {}", path.display(), stacked.len_of(Axis(0)), meta.steps + 1)));
    }
    let latents = stacked
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(t, z)| LatentState::new(z.to_owned(), t))
        .collect();
    Ok((InversionTrajectory::new(latents, meta.y_src.clone())?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ToyBackend;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_latent(seed: u64, t: usize) -> LatentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentState::new(Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(-1.0..1.0)), t)
    }

    #[test]
    fn schedule_is_monotone_and_covers_ends() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.timesteps[0], 1);
        assert_eq!(*s.timesteps.last().unwrap(), 981);
        assert!(s.alphas_cumprod().windows(2).all(|w| w[1] < w[0]));
        assert!((1..=50).all(|t| s.alpha(t) < s.alpha(t - 1)));
        // SD v1.x reference value of the first cumulative alpha
        assert!((s.alphas_cumprod()[0] - (1.0 - 0.00085)).abs() < 1e-12);
        assert!(NoiseSchedule::scaled_linear(1001).is_err());
        assert!(NoiseSchedule::from_alphas(vec![0.9, 0.95], 1).is_err());
    }

    #[test]
    fn zero_noise_step_scales_by_alpha_ratio() {
        let s = NoiseSchedule::scaled_linear(10).unwrap();
        let z = rand_latent(1, 7);
        let out = ddim_step(&z, &Array3::zeros((4, 4, 4)), &s).unwrap();
        assert_eq!(out.t, 6);
        let ratio = (s.alpha(6) / s.alpha(7)).sqrt();
        for (a, b) in out.data.iter().zip(z.data.iter()) {
            assert!((a - ratio * b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_alphas_with_zero_noise_is_identity() {
        let s = NoiseSchedule::from_alphas(vec![0.5; 10], 10).unwrap();
        let z = rand_latent(2, 4);
        let out = ddim_step(&z, &Array3::zeros((4, 4, 4)), &s).unwrap();
        for (a, b) in out.data.iter().zip(z.data.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn inversion_then_sampling_with_same_noise_is_inverse() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        for t in [0, 10, 49] {
            let z = rand_latent(3 + t as u64, t);
            let eps = rand_latent(100 + t as u64, t).data;
            let up = ddim_inversion_step(&z, &eps, &s).unwrap();
            let back = ddim_step(&up, &eps, &s).unwrap();
            assert_eq!(back.t, t);
            let err = (&back.data - &z.data).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
            assert!(err < 1e-6, "t={t}: {err}");
        }
    }

    #[test]
    fn step_at_zero_errors() {
        let s = NoiseSchedule::scaled_linear(10).unwrap();
        assert!(ddim_step(&rand_latent(1, 0), &Array3::zeros((4, 4, 4)), &s).is_err());
        assert!(ddim_inversion_step(&rand_latent(1, 10), &Array3::zeros((4, 4, 4)), &s).is_err());
    }

    #[test]
    fn trajectory_has_t_plus_one_latents() {
        let b = ToyBackend::new(3, 32, 32).unwrap();
        let x = ImageRGB::filled(32, 32, [0.2, 0.5, 0.7]).unwrap();
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let traj = ddim_invert(&x, "a vase", &b, &s).unwrap();
        assert_eq!(traj.len(), 51);
        assert_eq!(traj.at(0), &b.encode(&x).unwrap());
        let again = ddim_invert(&x, "a vase", &b, &s).unwrap();
        assert_eq!(traj, again);
    }

    fn max_abs(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        (a - b).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v))
    }

    #[test]
    fn constant_noise_round_trip_is_exact() {
        let b = ToyBackend::constant(1, 32, 32, 0.3).unwrap();
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let x = ImageRGB::filled(32, 32, [0.8, 0.1, 0.4]).unwrap();
        let traj = ddim_invert(&x, "a cup", &b, &s).unwrap();
        let back = ddim_sample(traj.at(50), &Conditioning::text("a cup"), &b, &s).unwrap();
        assert!(max_abs(&back.data, &traj.at(0).data) < 1e-5);
    }

    #[test]
    fn reconstruction_error_shrinks_with_more_steps() {
        let b = ToyBackend::new(11, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = LatentState::new(Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(-1.0..1.0)), 0);
        let cond = Conditioning::text("a teapot");
        let errs: Vec<f64> = [10, 25, 50]
            .iter()
            .map(|&steps| {
                let s = NoiseSchedule::scaled_linear(steps).unwrap();
                let traj = invert_latent(z0.clone(), "a teapot", &b, &s, &mut |_| Ok(())).unwrap();
                let back = ddim_sample(traj.at(steps), &cond, &b, &s).unwrap();
                max_abs(&back.data, &z0.data)
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    }

    #[test]
    fn trajectory_cache_round_trip() {
        let b = ToyBackend::new(3, 16, 16).unwrap();
        let x = ImageRGB::filled(16, 16, [0.0, 0.0, 0.0]).unwrap();
        let s = NoiseSchedule::scaled_linear(5).unwrap();
        let traj = ddim_invert(&x, "a box", &b, &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let key = trajectory_key(&x, "a box", 5, &b);
        save_trajectory(dir.path(), &traj, &s, "toy", &key).unwrap();
        let (back, meta) = load_trajectory(dir.path()).unwrap();
        assert_eq!(back, traj);
        assert_eq!(meta.key, key);
        assert_eq!(meta.timesteps, s.timesteps);
    }
}
