//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 invalid arguments or inputs, 3 backend or
//! weights failed to load, 4 runtime abort. Machine-readable output lines
//! start with `RESULT `.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::config::{make_config, TransferConfig};
use crate::denoiser::{BackendSpec, Denoiser};
use crate::error::Error;
use crate::eval::{evaluate_dataset, CropSpec, DatasetManifest, ImageEmbedder, Lpips, MethodResults, ToyEmbedder};
use crate::image::ImageRGB;
use crate::latent::{InversionTrajectory, PromptSet};
use crate::mask::BinaryMask;
use crate::pipeline::{
    ensure_writable_dir, invert_request, material_transfer_with, NoopObserver, RunDir, RunDirObserver, RunOptions, TrajectoryCache,
    TransferRequest,
};
use crate::sampler::{self, NoiseSchedule};

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const CACHE_ENV: &str = "MATFUSE_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "matfuse", version, about = "Exemplar-based material transfer with guided diffusion sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transfer a material exemplar onto the masked object of an image.
    Transfer(TransferArgs),
    /// Run one transfer per material force, sharing a single inversion.
    Sweep(SweepArgs),
    /// Invert an image and store its trajectory.
    Invert(InvertArgs),
    /// Score result directories against a dataset manifest.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP job API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Toy,
    Pretrained,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Toy)]
    pub backend: BackendKind,
    /// Pretrained weights directory (default: $MATFUSE_WEIGHTS_DIR).
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

impl BackendArgs {
    /// Toy backends are sized to the input image and seeded from the config.
    pub fn spec(&self, seed: u64, height: usize, width: usize) -> BackendSpec {
        match self.backend {
            BackendKind::Toy => BackendSpec::Toy { seed, height, width },
            BackendKind::Pretrained => BackendSpec::Pretrained {
                locator: self.weights.as_ref().map(|p| p.to_string_lossy().into_owned()),
            },
        }
    }
}

/// Config sources, lowest precedence first: defaults, `--config`, flags.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config document with any subset of the config keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub w: Option<f64>,
    /// Material transfer force.
    #[arg(long = "lambda")]
    pub lam: Option<f64>,
    #[arg(long)]
    pub v_self: Option<f64>,
    #[arg(long)]
    pub v_feat: Option<f64>,
    #[arg(long)]
    pub tau_g: Option<usize>,
    #[arg(long)]
    pub tau_m: Option<usize>,
    #[arg(long)]
    pub r_lower: Option<f64>,
    #[arg(long)]
    pub r_upper: Option<f64>,
    /// Number of DDIM steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TransferConfig, CliError> {
        let mut map = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?;
                match serde_json::from_str::<Value>(&text).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))? {
                    Value::Object(m) => m,
                    _ => return Err(CliError::invalid(format!("{}: config must be a JSON object", p.display()))),
                }
            }
            None => Map::new(),
        };
        let mut set = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        };
        set("w", self.w.map(Value::from));
        set("lam", self.lam.map(Value::from));
        set("v_self", self.v_self.map(Value::from));
        set("v_feat", self.v_feat.map(Value::from));
        set("tau_g", self.tau_g.map(Value::from));
        set("tau_m", self.tau_m.map(Value::from));
        set("r_lower", self.r_lower.map(Value::from));
        set("r_upper", self.r_upper.map(Value::from));
        set("T", self.steps.map(Value::from));
        set("seed", self.seed.map(Value::from));
        make_config(&map).map_err(CliError::from_input)
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Single-channel object mask, 255 = object.
    #[arg(long)]
    pub mask: PathBuf,
    /// Material exemplar image.
    #[arg(long)]
    pub material: PathBuf,
    #[arg(long)]
    pub src_prompt: String,
    #[arg(long)]
    pub trg_prompt: String,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Decode a preview every N steps (0 disables).
    #[arg(long, default_value_t = 10)]
    pub preview_every: usize,
    /// Trajectory cache directory.
    #[arg(long, env = CACHE_ENV)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated forces, e.g. "0.5,0.8,1.1,1.5".
    #[arg(long)]
    pub lambdas: String,
    /// Run this many transfers at once, each on its own backend instance.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Clone, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub src_prompt: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Output directory for `latents.npy` and `meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, env = CACHE_ENV)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PerceptualKind {
    /// AlexNet weights from --lpips-weights or the weights directory.
    Alexnet,
    /// Seeded random network; for smoke tests only.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    Clip,
    Toy,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// JSON-lines dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Result directory as `label[@lambda]=dir`; repeatable.
    #[arg(long = "results", required = true)]
    pub results: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum, default_value_t = PerceptualKind::Alexnet)]
    pub perceptual: PerceptualKind,
    #[arg(long)]
    pub lpips_weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EmbedderKind::Clip)]
    pub embedder: EmbedderKind,
    /// Pretrained weights directory (default: $MATFUSE_WEIGHTS_DIR).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128])]
    pub crop_sizes: Vec<usize>,
    /// Crop grid stride (default: half of each crop size).
    #[arg(long)]
    pub crop_stride: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Job store: uploads, run directories and the job log.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Worker threads (default: 1 for pretrained, CPU count for toy).
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value_t = 10)]
    pub preview_every: usize,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    /// Classifies an error raised while reading inputs.
    pub fn from_input(e: Error) -> Self {
        let code = if e.is_backend_load() { EXIT_BACKEND } else { EXIT_INVALID };
        Self { code, message: e.to_string() }
    }

    /// Classifies an error raised while running.
    pub fn from_runtime(e: Error) -> Self {
        let code = match &e {
            _ if e.is_backend_load() => EXIT_BACKEND,
            Error::Config { .. } | Error::UnknownConfigKey(_) | Error::Mask(_) | Error::MaskTooSmall { .. } => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        };
        Self { code, message: e.to_string() }
    }
}

fn result_line(key: &str, value: impl std::fmt::Display) {
    println!("RESULT {key}={value}");
}

/// Parses `std::env::args` and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Transfer(a) => cmd_transfer(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Invert(a) => cmd_invert(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn load_request(input: &InputArgs, config: TransferConfig) -> Result<TransferRequest, CliError> {
    let x = ImageRGB::load(&input.image).map_err(CliError::from_input)?;
    let mask = BinaryMask::load(&input.mask).map_err(CliError::from_input)?;
    let material = ImageRGB::load(&input.material).map_err(CliError::from_input)?;
    let prompts = PromptSet::new(&input.src_prompt, &input.trg_prompt).map_err(CliError::from_input)?;
    TransferRequest::new(x, mask, material, prompts, config).map_err(CliError::from_input)
}

fn build_backend(args: &BackendArgs, seed: u64, image: &ImageRGB) -> Result<Box<dyn Denoiser>, CliError> {
    args.spec(seed, image.height(), image.width()).build().map_err(|e| CliError {
        code: if e.is_backend_load() { EXIT_BACKEND } else { EXIT_INVALID },
        message: e.to_string(),
    })
}

/// Inverts through the cache when one is configured.
fn inversion(req: &TransferRequest, backend: &dyn Denoiser, cache_dir: Option<&Path>) -> Result<(InversionTrajectory, String), CliError> {
    match cache_dir {
        Some(dir) => {
            let (traj, key, hit) = TrajectoryCache::new(dir)
                .get_or_invert(req, backend, &mut NoopObserver)
                .map_err(CliError::from_runtime)?;
            log::info!("trajectory {key} ({})", if hit { "cached" } else { "computed" });
            Ok((traj, key))
        }
        None => {
            let key = TrajectoryCache::key(req, backend);
            Ok((invert_request(req, backend, &mut NoopObserver).map_err(CliError::from_runtime)?, key))
        }
    }
}

/// Runs one transfer into `out`, reusing `traj`.
fn run_into(
    out: &Path,
    req: &TransferRequest,
    backend: &dyn Denoiser,
    traj: &InversionTrajectory,
    key: &str,
    opts: &RunOptions,
    force: bool,
) -> Result<(PathBuf, ImageRGB), CliError> {
    let mut dir = RunDir::create(out, req, backend.manifest(), opts, force).map_err(CliError::from_input)?;
    dir.write_trajectory(traj, key).map_err(CliError::from_runtime)?;
    let mut obs = RunDirObserver { dir: &mut dir, error: None };
    let res = material_transfer_with(req, backend, opts, &mut obs, Some(traj));
    let write_err = obs.error.take();
    let res = match res {
        Ok(r) => r,
        Err(e) => {
            let _ = dir.mark("failed");
            return Err(CliError::from_runtime(e));
        }
    };
    if let Some(e) = write_err {
        return Err(CliError::from_runtime(e));
    }
    let path = dir.finish(&res).map_err(CliError::from_runtime)?;
    Ok((path, res.x_edit))
}

fn cmd_transfer(a: &TransferArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    let req = load_request(&a.input, config)?;
    if a.run.out.exists() && !a.run.force && std::fs::read_dir(&a.run.out).map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(CliError::invalid(format!("{} exists and is not empty (use --force to overwrite)", a.run.out.display())));
    }
    let backend = build_backend(&a.backend, config.seed, &req.x_init)?;
    let opts = RunOptions {
        preview_every: a.run.preview_every,
        ..Default::default()
    };
    let (traj, key) = inversion(&req, backend.as_ref(), a.run.cache_dir.as_deref())?;
    let (path, _) = run_into(&a.run.out, &req, backend.as_ref(), &traj, &key, &opts, a.run.force)?;
    result_line("config", serde_json::to_string(&config).expect("config serializes"));
    result_line("run_dir", a.run.out.display());
    result_line("result", path.display());
    Ok(())
}

fn parse_lambdas(text: &str) -> Result<Vec<f64>, CliError> {
    let lambdas = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| CliError::invalid(format!("bad lambda {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if lambdas.is_empty() {
        return Err(CliError::invalid("--lambdas must list at least one value"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(CliError::invalid(format!("lambda {l} must be finite and >= 0")));
    }
    Ok(lambdas)
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut lambdas = parse_lambdas(&a.lambdas)?;
    lambdas.sort_by(f64::total_cmp);
    if a.parallel == 0 {
        return Err(CliError::invalid("--parallel must be at least 1"));
    }
    let config = a.config.resolve()?;
    let req = load_request(&a.input, config)?;
    ensure_writable_dir(&a.run.out, a.run.force).map_err(CliError::from_input)?;
    let backend = build_backend(&a.backend, config.seed, &req.x_init)?;
    let (traj, key) = inversion(&req, backend.as_ref(), a.run.cache_dir.as_deref())?;
    let opts = RunOptions {
        preview_every: a.run.preview_every,
        ..Default::default()
    };
    let jobs: Vec<(usize, f64, PathBuf)> = lambdas
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, l, a.run.out.join(format!("{i:02}_lambda_{l}"))))
        .collect();
    let run_one = |backend: &dyn Denoiser, (_, lam, dir): &(usize, f64, PathBuf)| {
        let mut r = req.clone();
        r.config.lam = *lam;
        run_into(dir, &r, backend, &traj, &key, &opts, true)
    };
    let mut outputs: Vec<Option<Result<(PathBuf, ImageRGB), CliError>>> = (0..jobs.len()).map(|_| None).collect();
    if a.parallel == 1 {
        for (slot, job) in outputs.iter_mut().zip(&jobs) {
            *slot = Some(run_one(backend.as_ref(), job));
        }
    } else {
        let queue = Mutex::new(jobs.iter());
        let results = Mutex::new(&mut outputs);
        let workers = a.parallel.min(jobs.len());
        let backends = (0..workers)
            .map(|_| build_backend(&a.backend, config.seed, &req.x_init))
            .collect::<Result<Vec<_>, _>>()?;
        std::thread::scope(|s| {
            for b in backends {
                let (queue, results, run_one) = (&queue, &results, &run_one);
                s.spawn(move || loop {
                    let Some(job) = queue.lock().expect("queue lock").next() else { break };
                    let out = run_one(b.as_ref(), job);
                    results.lock().expect("results lock")[job.0] = Some(out);
                });
            }
        });
    }
    let mut images = Vec::with_capacity(jobs.len());
    for ((_, lam, dir), out) in jobs.iter().zip(outputs) {
        let (path, img) = out.expect("every job ran")?;
        result_line(&format!("lambda[{lam}]"), path.display());
        log::info!("lambda {lam}: {}", dir.display());
        images.push(img);
    }
    let sheet = ImageRGB::hconcat(&images).map_err(CliError::from_runtime)?;
    let sheet_path = a.run.out.join("contact_sheet.png");
    sheet.save_png(&sheet_path).map_err(CliError::from_runtime)?;
    result_line("contact_sheet", sheet_path.display());
    result_line("run_dir", a.run.out.display());
    Ok(())
}

fn cmd_invert(a: &InvertArgs) -> Result<(), CliError> {
    let x = ImageRGB::load(&a.image).map_err(CliError::from_input)?;
    x.ensure_latent_compatible().map_err(CliError::from_input)?;
    if a.src_prompt.trim().is_empty() {
        return Err(CliError::invalid("source prompt must not be empty"));
    }
    let schedule = NoiseSchedule::scaled_linear(a.steps).map_err(CliError::from_input)?;
    ensure_writable_dir(&a.out, a.force).map_err(CliError::from_input)?;
    let backend = build_backend(&a.backend, a.seed, &x)?;
    let key = sampler::trajectory_key(&x, &a.src_prompt, a.steps, backend.as_ref());
    let cached = a.cache_dir.as_ref().map(|d| TrajectoryCache::new(d).dir_for(&key));
    let traj = match cached.as_ref().filter(|d| d.join("meta.json").is_file()) {
        Some(d) => sampler::load_trajectory(d).map_err(CliError::from_runtime)?.0,
        None => sampler::ddim_invert(&x, &a.src_prompt, backend.as_ref(), &schedule).map_err(CliError::from_runtime)?,
    };
    sampler::save_trajectory(&a.out, &traj, &schedule, &backend.manifest().name, &key).map_err(CliError::from_runtime)?;
    if let Some(d) = cached.filter(|d| !d.exists()) {
        sampler::save_trajectory(&d, &traj, &schedule, &backend.manifest().name, &key).map_err(CliError::from_runtime)?;
    }
    result_line("key", &key);
    result_line("trajectory", a.out.display());
    Ok(())
}

fn load_embedder(kind: EmbedderKind, weights: Option<&Path>) -> Result<Box<dyn ImageEmbedder>, CliError> {
    match kind {
        EmbedderKind::Toy => Ok(Box::new(ToyEmbedder::new(0))),
        EmbedderKind::Clip => crate::eval::load_clip_embedder(weights).map_err(CliError::from_input),
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&a.manifest).map_err(CliError::from_input)?;
    manifest.validate().map_err(CliError::from_input)?;
    let methods = a
        .results
        .iter()
        .map(|s| MethodResults::parse(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::from_input)?;
    if let Some(m) = methods.iter().find(|m| !m.dir.is_dir()) {
        return Err(CliError::invalid(format!("results directory {} does not exist", m.dir.display())));
    }
    if a.crop_sizes.is_empty() || a.crop_sizes.contains(&0) || a.crop_stride == Some(0) {
        return Err(CliError::invalid("crop sizes and stride must be positive"));
    }
    ensure_writable_dir(&a.out, a.force).map_err(CliError::from_input)?;
    let lpips = match a.perceptual {
        PerceptualKind::Toy => Lpips::random(0, [16, 32, 32, 32, 32]),
        PerceptualKind::Alexnet => {
            let path = match &a.lpips_weights {
                Some(p) => p.clone(),
                None => Lpips::locate(a.weights.as_deref()).map_err(CliError::from_input)?,
            };
            Lpips::load(path).map_err(CliError::from_input)?
        }
    };
    let embedder = load_embedder(a.embedder, a.weights.as_deref())?;
    let spec = CropSpec {
        sizes: a.crop_sizes.clone(),
        stride: a.crop_stride,
    };
    let report = evaluate_dataset(&manifest, &methods, &lpips, embedder.as_ref(), &spec).map_err(CliError::from_runtime)?;
    report.write(&a.out).map_err(CliError::from_runtime)?;
    for r in &report.records {
        let lam = r.lambda.map(|l| format!("@{l}")).unwrap_or_default();
        println!(
            "RESULT method={}{lam} clip_score={:.4} lpips={:.4} entries={} zone={:?}",
            r.method, r.clip_score, r.lpips, r.entries, r.zone()
        );
    }
    result_line("favorable_count", report.favorable_count());
    result_line("skipped", report.skipped.len());
    result_line("report", a.out.join("report.csv").display());
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let workers = a.workers.unwrap_or(match a.backend.backend {
        BackendKind::Pretrained => 1,
        BackendKind::Toy => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    });
    if workers == 0 {
        return Err(CliError::invalid("--workers must be at least 1"));
    }
    let settings = crate::service::ServiceSettings {
        data_dir: a.data_dir.clone(),
        workers,
        backend: a.backend.clone(),
        preview_every: a.preview_every,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    })?;
    rt.block_on(async {
        let service = crate::service::Service::start(settings).map_err(CliError::from_input)?;
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError::invalid(format!("cannot bind {}: {e}", a.addr)))?;
        let local = listener.local_addr().map_err(|e| CliError::invalid(e.to_string()))?;
        result_line("listening", format!("http://{local}"));
        axum::serve(listener, service.router())
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError {
                code: EXIT_RUNTIME,
                message: e.to_string(),
            })?;
        service.shutdown();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_list_parsing() {
        assert_eq!(parse_lambdas("0.5, 0.8,1.1,1.5").unwrap(), vec![0.5, 0.8, 1.1, 1.5]);
        assert_eq!(parse_lambdas("").unwrap_err().code, EXIT_INVALID);
        assert!(parse_lambdas("0.5,x").is_err());
        assert!(parse_lambdas("-1").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"lam": 1.2, "w": 5.0}"#).unwrap();
        let cli = Cli::try_parse_from(["matfuse", "transfer", "--image", "a", "--mask", "b", "--material", "c", "--src-prompt", "x", "--trg-prompt", "y", "--out", "o", "--config", p.to_str().unwrap(), "--lambda", "0.8"]).unwrap();
        let Command::Transfer(a) = cli.command else { panic!() };
        let c = a.config.resolve().unwrap();
        assert_eq!((c.lam, c.w, c.v_self), (0.8, 5.0, 700_000.0));
    }

    #[test]
    fn error_classes() {
        assert_eq!(CliError::from_runtime(Error::NonFinite { step: 3 }).code, EXIT_RUNTIME);
        let load = Error::BackendLoad {
            component: "x".into(),
            reason: "y".into(),
        };
        assert_eq!(CliError::from_runtime(load).code, EXIT_BACKEND);
        assert_eq!(CliError::from_input(Error::Mask("mask empty".into())).code, EXIT_INVALID);
    }
}
