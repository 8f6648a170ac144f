//! Command-line front end. [`run`] parses arguments, resolves configuration
//! files with `--override` and `--seed`, and dispatches to the library.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::camera::{camera_gate, CameraState};
use crate::dataset::{load_dataset, propagate_prompts, save_dataset, PosedImageSet, RgbImage, SparsePointCloud};
use crate::error::Error;
use crate::eval::{eval_report, render_view};
use crate::field::mlp::FieldState;
use crate::gradcheck::{gradient_check, DEFAULT_EPS};
use crate::losses::ScheduleState;
use crate::pipeline::StepSettings;
use crate::sampler::{
    mask_visibility, patch_distribution, sample_batch, Grouping, PatchSummary, VisibilityHistogram,
};
use crate::scene::{pixel_visibility, render_oracle, sparse_cloud, synthesize_dataset, Quadrature, SceneFile};
use crate::trainer::{Checkpoint, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "declutter", version, about = "Occlusion-aware radiance fields from masked multi-view images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Seed for every random stream; replaces the config's seed.
    #[arg(long, value_name = "INT", default_value_t = 0)]
    seed: u64,
    /// Replace a config value, e.g. `schedule.w_s3im=0` (repeatable).
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Compute backend hint. Only `cpu` is available.
    #[arg(long, value_name = "NAME")]
    device: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a scene file into a dataset directory with occluder masks.
    Synth(Common),
    /// Train a radiance field on the dataset named in the config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Render views from a checkpoint.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Views to render; holdout views when omitted.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        views: Vec<usize>,
    },
    /// Masked PSNR/SSIM on holdout views.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Pixel and patch visibility statistics.
    AnalyzeVisibility(Common),
    /// Carry point prompts from one view to all others through a sparse point cloud.
    PropagateMasks(Common),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Rays in the probe batch.
        #[arg(long, value_name = "INT", default_value_t = 16)]
        rays: usize,
        /// Randomly chosen field parameters to probe.
        #[arg(long, value_name = "INT", default_value_t = 60)]
        field_samples: usize,
        #[arg(long, value_name = "FLOAT", default_value_t = DEFAULT_EPS)]
        eps: f64,
        /// Iteration to evaluate at; defaults to the first with the camera gate open.
        #[arg(long, value_name = "INT")]
        iteration: Option<usize>,
        /// Overrides the field depth and width for a faster check.
        #[arg(long, value_name = "INT")]
        width: Option<usize>,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: if e.is_validation() { EXIT_INVALID } else { EXIT_RUNTIME },
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("DECLUTTER_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(c) => synth(&c),
        Command::Train { common, resume } => train(&common, resume.as_deref()),
        Command::Render {
            common,
            checkpoint,
            views,
        } => render(&common, &checkpoint, &views),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::AnalyzeVisibility(c) => analyze_visibility(&c),
        Command::PropagateMasks(c) => propagate(&c),
        Command::Gradcheck {
            common,
            rays,
            field_samples,
            eps,
            iteration,
            width,
        } => gradcheck(&common, rays, field_samples, eps, iteration, width),
    }
}

/// Sets `key.sub=value` on a JSON tree; the path must already exist.
/// The value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("--override {spec:?} is not of the form key=value"))?;
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| format!("--override: unknown config key {key:?}"))?,
            _ => return Err(format!("--override: {key:?} does not name a config field")),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Configs whose randomness is driven by one seed field.
trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

impl Seeded for TrainConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Seeded for SceneFile {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

/// Reads a config, fills defaults, applies overrides then the seed, and
/// writes the result to `<out>/resolved_config.json`.
fn resolve_config<T>(c: &Common) -> CliResult<T>
where
    T: Serialize + DeserializeOwned + Seeded,
{
    if let Some(d) = &c.device {
        if d != "cpu" {
            warn!("--device {d:?} is not available; running on cpu");
        }
    }
    let text = fs::read_to_string(&c.config)
        .map_err(|e| CliError::invalid(format!("--config {}: {e}", c.config.display())))?;
    let parsed: T = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("--config {}: {e}", c.config.display())))?;
    let mut tree = serde_json::to_value(&parsed).map_err(Error::from)?;
    for o in &c.overrides {
        apply_override(&mut tree, o).map_err(CliError::invalid)?;
    }
    let mut cfg: T = serde_json::from_value(tree).map_err(|e| CliError::invalid(format!("--override: {e}")))?;
    cfg.set_seed(c.seed);
    fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let path = c.out.join("resolved_config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).map_err(Error::from)?).map_err(|e| Error::io(&path, e))?;
    Ok(cfg)
}

/// Relative paths inside a config are taken relative to the config file.
fn relative_to_config(c: &Common, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    c.config.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
}

fn dataset_for(c: &Common, cfg: &TrainConfig) -> CliResult<PosedImageSet> {
    let dir = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::invalid(format!("--config {}: `dataset` is required", c.config.display())))?;
    Ok(load_dataset(&relative_to_config(c, dir), cfg.scale)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn synth(c: &Common) -> CliResult<()> {
    let file: SceneFile = resolve_config(c)?;
    file.scene().validate()?;
    file.rig().validate()?;
    let set = synthesize_dataset(&file)?;
    save_dataset(&set, &c.out)?;
    let (scene, rig) = (file.scene(), file.rig());
    let clean = c.out.join("oracle_clean");
    fs::create_dir_all(&clean).map_err(|e| Error::io(&clean, e))?;
    for v in 0..rig.num_views() {
        let img = render_oracle(&scene, &rig, v, file.samples_per_ray, false, Quadrature::Midpoint)?;
        img.save_png(&clean.join(format!("{v:03}.png")))?;
    }
    match sparse_cloud(&scene, &rig, 4) {
        Ok(cloud) => cloud.save(&c.out.join("points.json"))?,
        Err(e) => info!("no points.json: {e}"),
    }
    info!("wrote {} views to {}", set.num_views(), c.out.display());
    Ok(())
}

fn train(c: &Common, resume: Option<&Path>) -> CliResult<()> {
    let cfg: TrainConfig = resolve_config(c)?;
    cfg.validate()?;
    let set = dataset_for(c, &cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.hash() != cfg.hash() {
                return Err(CliError::invalid(format!(
                    "--resume {}: checkpoint was trained with a different config",
                    p.display()
                )));
            }
            Trainer::resume(ck, &set)?
        }
        None => Trainer::new(cfg, &set)?,
    };
    trainer.run(Some(&c.out))?;
    if let Some(last) = trainer.log().last() {
        println!("iter {} mse {:.6e} psnr {:.3}", last.iter, last.mse, last.psnr_val);
    }
    Ok(())
}

fn load_model(path: &Path, set: &PosedImageSet) -> CliResult<(FieldState<f32>, CameraState<f32>)> {
    let ck = Checkpoint::load(path)?;
    if ck.camera.num_views() != set.num_views() {
        return Err(CliError::invalid(format!(
            "--checkpoint {}: {} views, dataset has {}",
            path.display(),
            ck.camera.num_views(),
            set.num_views()
        )));
    }
    Ok((ck.field, ck.camera))
}

fn render(c: &Common, checkpoint: &Path, views: &[usize]) -> CliResult<()> {
    let cfg: TrainConfig = resolve_config(c)?;
    let set = dataset_for(c, &cfg)?;
    let (field, camera) = load_model(checkpoint, &set)?;
    let views = if views.is_empty() { set.holdout_indices.clone() } else { views.to_vec() };
    if views.is_empty() {
        return Err(CliError::invalid("--views: dataset has no holdout views; pass --views"));
    }
    let render = cfg.render_config(&set);
    let intr = camera.intrinsics();
    for v in views {
        if v >= set.num_views() {
            return Err(CliError::invalid(format!("--views: view {v} out of range")));
        }
        let img = render_view(&field, &camera.effective_pose(v), &intr, set.resolution(), &render)?;
        img.save_png(&c.out.join(format!("render_{v:03}.png")))?;
    }
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path) -> CliResult<()> {
    let cfg: TrainConfig = resolve_config(c)?;
    let set = dataset_for(c, &cfg)?;
    if set.holdout_indices.is_empty() {
        return Err(CliError::invalid("dataset has no holdout views"));
    }
    let (field, camera) = load_model(checkpoint, &set)?;
    let (report, renders) = eval_report(&field, &camera, &set, &cfg.render_config(&set))?;
    report.save(&c.out)?;
    for (v, img) in set.holdout_indices.iter().zip(&renders) {
        img.save_png(&c.out.join(format!("holdout_{v:03}.png")))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

/// Input of `analyze-visibility`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisibilityConfig {
    /// Scene file for exact oracle visibility.
    pub scene: Option<PathBuf>,
    /// Dataset directory; visibility approximated by valid-view counts per pixel.
    pub dataset: Option<PathBuf>,
    /// Reference views for oracle visibility; all views when empty.
    pub reference_views: Vec<usize>,
    pub patch_sides: Vec<usize>,
    pub patches: usize,
    pub trials: usize,
    pub grouping: Grouping,
    pub seed: u64,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        VisibilityConfig {
            scene: None,
            dataset: None,
            reference_views: Vec::new(),
            patch_sides: vec![2, 4, 8],
            patches: 64,
            trials: 100,
            grouping: Grouping::WithoutReplacement,
            seed: 0,
        }
    }
}

impl Seeded for VisibilityConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

#[derive(Serialize)]
struct VisibilitySummary {
    source: &'static str,
    alpha: f64,
    x_max: u32,
    pixels: usize,
    patches: Vec<PatchSummaryOut>,
}

#[derive(Serialize)]
struct PatchSummaryOut {
    k: usize,
    variance_ratio: f64,
    mean: f64,
    variance: f64,
    bound_violations: usize,
}

impl From<&PatchSummary> for PatchSummaryOut {
    fn from(s: &PatchSummary) -> Self {
        PatchSummaryOut {
            k: s.patch_side,
            variance_ratio: s.variance_ratio,
            mean: s.mean,
            variance: s.variance,
            bound_violations: s.bound_violations,
        }
    }
}

fn analyze_visibility(c: &Common) -> CliResult<()> {
    let cfg: VisibilityConfig = resolve_config(c)?;
    let (values, x_max, source, maps) = match (&cfg.scene, &cfg.dataset) {
        (Some(p), None) => {
            let file = SceneFile::load(&relative_to_config(c, p))?;
            let (scene, rig) = (file.scene(), file.rig());
            let views = if cfg.reference_views.is_empty() {
                (0..rig.num_views()).collect()
            } else {
                cfg.reference_views.clone()
            };
            let mut values = Vec::new();
            let mut maps = Vec::new();
            for v in views {
                let vis = pixel_visibility(&scene, &rig, v)?;
                values.extend(vis.iter().copied());
                maps.push((v, vis));
            }
            (values, rig.num_views() as u32, "oracle", maps)
        }
        (None, Some(p)) => {
            let set = load_dataset(&relative_to_config(c, p), 1)?;
            warn!("dataset visibility is approximated by per-pixel valid-view counts");
            (mask_visibility(&set), set.num_views() as u32, "mask_count_approximation", Vec::new())
        }
        _ => return Err(CliError::invalid("--config: set exactly one of `scene` or `dataset`")),
    };
    let mut hist = VisibilityHistogram::from_values(values.iter().copied(), x_max);
    let alpha = hist.fit()?;
    let mut csv = String::from("x,count,P\n");
    let total = hist.total();
    for (x, count, p) in hist.rows() {
        csv.push_str(&format!("{x},{count},{p}\n"));
    }
    let csv_path = c.out.join("visibility.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let mut patches = Vec::new();
    for &k in &cfg.patch_sides {
        let s = patch_distribution(&values, k, cfg.patches, cfg.trials, cfg.seed, cfg.grouping)?;
        patches.push(PatchSummaryOut::from(&s));
    }
    write_json(
        &c.out.join("visibility_summary.json"),
        &VisibilitySummary {
            source,
            alpha,
            x_max,
            pixels: total as usize,
            patches,
        },
    )?;
    let bars: Vec<f64> = (0..=x_max).map(|x| hist.counts.get(&x).copied().unwrap_or(0.0)).collect();
    bar_chart(&bars, 320, 200).save_png(&c.out.join("visibility_hist.png"))?;
    for (v, vis) in maps {
        darkness_map(&vis, x_max).save_png(&c.out.join(format!("visibility_{v:03}.png")))?;
    }
    println!("alpha {alpha:.4} over {} pixels", total);
    Ok(())
}

/// Bars on a white canvas, heights normalized to the largest value.
fn bar_chart(values: &[f64], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, [1.0, 1.0, 1.0]);
    let peak = values.iter().cloned().fold(0.0, f64::max);
    if values.is_empty() || peak <= 0.0 {
        return img;
    }
    let slot = width as f64 / values.len() as f64;
    for (i, &v) in values.iter().enumerate() {
        let bar = ((v / peak) * (height - 1) as f64).round() as usize;
        let x0 = (i as f64 * slot + 0.15 * slot) as usize;
        let x1 = (((i + 1) as f64 * slot - 0.15 * slot) as usize).max(x0 + 1).min(width);
        for x in x0..x1 {
            for y in height - bar..height {
                img.set(x, y, [0.2, 0.3, 0.6]);
            }
        }
    }
    img
}

/// Gray-scale map, darker where visibility is lower: intensity `1 + log(x / x_max) / log(x_max + 1)`.
fn darkness_map(vis: &ndarray::Array2<u32>, x_max: u32) -> RgbImage {
    let (h, w) = vis.dim();
    let mut img = RgbImage::new(w, h);
    let scale = ((x_max + 1) as f64).ln();
    for ((y, x), &v) in vis.indexed_iter() {
        let g = if v == 0 {
            0.0
        } else {
            (1.0 + (v as f64 / x_max as f64).ln() / scale).clamp(0.0, 1.0) as f32
        };
        img.set(x, y, [g, g, g]);
    }
    img
}

/// Input of `propagate-masks`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateConfig {
    pub dataset: PathBuf,
    /// Sparse point cloud; `<dataset>/points.json` when absent.
    #[serde(default)]
    pub points: Option<PathBuf>,
    pub source_view: usize,
    pub prompts: Vec<[f64; 2]>,
    #[serde(default = "default_pixel_radius")]
    pub pixel_radius: f64,
}

fn default_pixel_radius() -> f64 {
    8.0
}

impl Seeded for PropagateConfig {
    fn set_seed(&mut self, _seed: u64) {}
}

fn propagate(c: &Common) -> CliResult<()> {
    let cfg: PropagateConfig = resolve_config(c)?;
    let dir = relative_to_config(c, &cfg.dataset);
    let set = load_dataset(&dir, 1)?;
    let points = cfg
        .points
        .as_ref()
        .map_or_else(|| dir.join("points.json"), |p| relative_to_config(c, p));
    let cloud = SparsePointCloud::load(&points)?;
    let (w, h) = set.resolution();
    cloud.validate(set.num_views(), w, h)?;
    let out = propagate_prompts(&cfg.prompts, cfg.source_view, &cloud, &set, cfg.pixel_radius)?;
    write_json(&c.out.join("propagated_prompts.json"), &out)?;
    if !out.unmatched.is_empty() {
        warn!("prompts without a sparse point within {} px: {:?}", cfg.pixel_radius, out.unmatched);
    }
    println!(
        "{} of {} prompts matched; {} unmatched",
        cfg.prompts.len() - out.unmatched.len(),
        cfg.prompts.len(),
        out.unmatched.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput {
    iteration: usize,
    eps: f64,
    max_relative_error: f64,
    report: crate::gradcheck::GradcheckReport,
    gated: Option<crate::gradcheck::GradcheckReport>,
    passed: bool,
}

fn gradcheck(
    c: &Common,
    rays: usize,
    field_samples: usize,
    eps: f64,
    iteration: Option<usize>,
    width: Option<usize>,
) -> CliResult<()> {
    let mut cfg: TrainConfig = resolve_config(c)?;
    if let Some(w) = width {
        cfg.field.width = w;
    }
    cfg.validate()?;
    if !(eps > 0.0) {
        return Err(CliError::invalid("--eps must be positive"));
    }
    let set = dataset_for(c, &cfg)?;
    let schedule = ScheduleState::resolve(cfg.total_iters, &cfg.schedule)?;
    let field = FieldState::<f64>::new(cfg.field_config(&set), cfg.seed)?;
    let mut camera = CameraState::<f64>::new(set.intrinsics, set.poses.clone(), schedule.t_c, cfg.tie_focal);
    // Small residuals so the rotation Jacobians are not evaluated only at zero.
    for v in 0..camera.num_views() {
        let k = v as f64 + 1.0;
        camera.set_rotation(v, nalgebra::Vector3::new(1e-3 * k, -5e-4 * k, 2e-4));
        camera.set_translation(v, nalgebra::Vector3::new(-2e-3, 1e-3 * k, 5e-4));
    }
    let mode = cfg.ablation_mode;
    let mut s3im = cfg.s3im.clone();
    if mode.terms().s3im && s3im.validate(rays).is_err() {
        let k = (rays as f64).sqrt().floor() as usize;
        s3im.patch_side = k.max(1);
        s3im.patch_count = None;
        s3im.window = s3im.window.min(k).max(1);
        s3im.stride = None;
        info!("probe batch too small for the configured patches; using {k}x{k}");
    }
    let pixels = sample_batch(&set, rays, cfg.seed)?;
    let render = cfg.render_config(&set);
    let t = iteration.unwrap_or(schedule.t_c.max(1));
    let settings = |it: usize| StepSettings {
        iteration: it,
        schedule: &schedule,
        render: &render,
        s3im: &s3im,
        terms: mode.terms(),
        anneal_frequency: mode.anneals_frequency(),
        camera_trainable: mode.learns_camera() && camera_gate(it, &camera),
        loss_seed: cfg.seed,
        jitter_seed: Some(cfg.seed.wrapping_add(1)),
    };
    let report = gradient_check(&field, &camera, &set, &pixels, &settings(t), eps, field_samples, cfg.seed)?;
    let gated = if schedule.t_c > 1 && mode.learns_camera() {
        Some(gradient_check(&field, &camera, &set, &pixels, &settings(schedule.t_c - 1), eps, field_samples, cfg.seed)?)
    } else {
        None
    };
    let gated_ok = gated.as_ref().map_or(true, |g| g.camera_gated_zero == Some(true));
    let max = report
        .max_relative_error
        .max(gated.as_ref().map_or(0.0, |g| g.field_max_relative_error));
    let passed = max < 1e-3 && gated_ok;
    println!("max relative error {max:.3e}");
    if let Some(w) = &report.worst {
        println!("worst {} analytic {:.6e} numeric {:.6e}", w.name, w.analytic, w.numeric);
    }
    if let Some(g) = &gated {
        println!("camera gradients before t_c exactly zero: {}", g.camera_gated_zero == Some(true));
    }
    write_json(
        &c.out.join("gradcheck.json"),
        &GradcheckOutput {
            iteration: t,
            eps,
            max_relative_error: max,
            report,
            gated,
            passed,
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_RUNTIME,
            message: format!("gradient check failed: max relative error {max:.3e}"),
        })
    }
}
