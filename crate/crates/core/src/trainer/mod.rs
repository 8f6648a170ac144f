//! Training loop: batch sampling, the gated objective, Adam updates, metric
//! logging and periodic checkpoints.

mod adam;
mod checkpoint;

use std::path::{Path, PathBuf};

use log::info;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{decayed_lr, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::camera::{camera_gate, CameraState, PixelRef};
use crate::dataset::PosedImageSet;
use crate::error::{Error, Result};
use crate::field::mlp::{FieldConfig, FieldState};
use crate::field::render::RenderConfig;
use crate::losses::{LossTerms, S3imConfig, ScheduleConfig, ScheduleState};
use crate::pipeline::{forward_backward, StepSettings};
use crate::sampler::PixelSampler;

/// The four ablation modes, each adding one component to the previous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Masked photometric loss only, cameras frozen.
    #[serde(rename = "masked_nerf")]
    MaskedNerf,
    #[serde(rename = "plus_camera", alias = "+camera")]
    PlusCamera,
    /// Adds frequency annealing and the near-camera density penalty.
    #[serde(rename = "plus_oar", alias = "+oar")]
    PlusOar,
    #[default]
    #[serde(rename = "plus_s3im", alias = "+s3im")]
    PlusS3im,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::MaskedNerf,
        AblationMode::PlusCamera,
        AblationMode::PlusOar,
        AblationMode::PlusS3im,
    ];

    pub fn learns_camera(self) -> bool {
        self != AblationMode::MaskedNerf
    }

    pub fn anneals_frequency(self) -> bool {
        matches!(self, AblationMode::PlusOar | AblationMode::PlusS3im)
    }

    pub fn terms(self) -> LossTerms {
        LossTerms {
            occlusion: self.anneals_frequency(),
            s3im: self == AblationMode::PlusS3im,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::MaskedNerf => "masked_nerf",
            AblationMode::PlusCamera => "plus_camera",
            AblationMode::PlusOar => "plus_oar",
            AblationMode::PlusS3im => "plus_s3im",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset directory, used by the command-line front end.
    pub dataset: Option<PathBuf>,
    /// Integer downsampling factor applied when loading the dataset.
    pub scale: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub white_background: bool,
    pub lr_field: f64,
    pub lr_field_final: f64,
    pub lr_camera: f64,
    pub lr_camera_final: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    pub schedule: ScheduleConfig,
    pub s3im: S3imConfig,
    pub field: FieldConfig,
    /// Replace the field's normalization box by one enclosing every camera frustum.
    pub fit_scene_bounds: bool,
    pub learn_focal: bool,
    pub tie_focal: bool,
    pub log_every: usize,
    pub checkpoint_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: None,
            scale: 1,
            total_iters: 5000,
            batch_size: 4096,
            samples_per_ray: 64,
            stratified: true,
            white_background: false,
            lr_field: 5e-4,
            lr_field_final: 5e-5,
            lr_camera: 1e-3,
            lr_camera_final: 1e-4,
            adam: AdamConfig::default(),
            seed: 0,
            ablation_mode: AblationMode::default(),
            schedule: ScheduleConfig::default(),
            s3im: S3imConfig::default(),
            field: FieldConfig::default(),
            fit_scene_bounds: true,
            learn_focal: true,
            tie_focal: false,
            log_every: 100,
            checkpoint_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_iters == 0 {
            return bad("total_iters must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.scale == 0 {
            return bad("scale must be >= 1".into());
        }
        if self.samples_per_ray < 2 {
            return bad("samples_per_ray must be >= 2".into());
        }
        for (key, v) in [
            ("lr_field", self.lr_field),
            ("lr_field_final", self.lr_field_final),
            ("lr_camera", self.lr_camera),
            ("lr_camera_final", self.lr_camera_final),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{key} must be positive, got {v}"));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam.beta1/beta2 must lie in [0, 1) and adam.eps > 0".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        if !(self.checkpoint_fraction > 0.0 && self.checkpoint_fraction <= 1.0) {
            return bad(format!("checkpoint_fraction must lie in (0, 1], got {}", self.checkpoint_fraction));
        }
        self.field.validate()?;
        ScheduleState::resolve(self.total_iters, &self.schedule)?;
        if self.ablation_mode.terms().s3im {
            self.s3im.validate(self.batch_size)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Iterations between checkpoints.
    pub fn checkpoint_interval(&self) -> usize {
        ((self.total_iters as f64 * self.checkpoint_fraction).round() as usize).max(1)
    }

    pub fn render_config(&self, set: &PosedImageSet) -> RenderConfig {
        RenderConfig {
            samples_per_ray: self.samples_per_ray,
            near: set.near,
            far: set.far,
            stratified: self.stratified,
            white_background: self.white_background,
        }
    }

    /// Field config with the normalization box fitted to the dataset when requested.
    pub fn field_config(&self, set: &PosedImageSet) -> FieldConfig {
        let mut cfg = self.field.clone();
        if self.fit_scene_bounds {
            let (center, radius) = frustum_bounds(set);
            cfg.scene_center = center;
            cfg.scene_radius = radius;
        }
        cfg
    }
}

/// Center and half-extent of the box enclosing every camera's near-far frustum.
pub fn frustum_bounds(set: &PosedImageSet) -> ([f64; 3], f64) {
    let (w, h) = set.resolution();
    let intr = &set.intrinsics;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for pose in &set.poses {
        for (x, y) in [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)] {
            let d = pose.rotation * Vector3::new((x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, 1.0);
            for z in [set.near, set.far] {
                let p = pose.translation + d * z;
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    let center = (lo + hi) * 0.5;
    let radius = ((hi - lo) * 0.5).max().max(1e-6);
    ([center.x, center.y, center.z], radius)
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub mse: f64,
    pub occ: f64,
    pub s3im: f64,
    pub w_occ: f64,
    pub f_max: f64,
    /// PSNR of the current training batch.
    pub psnr_val: f64,
}

pub const LOG_HEADER: &str = "iter,mse,occ,s3im,w_occ,f_max,psnr_val";

/// What a single iteration did, beyond the logged values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub row: LogRow,
    pub camera_updated: bool,
    pub camera_grad_max_abs: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        99.0
    } else {
        (-10.0 * mse.log10()).min(99.0)
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Model, optimizer and schedule state of one run over a borrowed dataset.
pub struct Trainer<'a> {
    config: TrainConfig,
    set: &'a PosedImageSet,
    schedule: ScheduleState,
    render: RenderConfig,
    sampler: PixelSampler,
    field: FieldState<f32>,
    camera: CameraState<f32>,
    field_opt: Adam,
    camera_opt: Adam,
    iteration: usize,
    log: Vec<LogRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, set: &'a PosedImageSet) -> Result<Self> {
        config.validate()?;
        set.validate()?;
        let schedule = ScheduleState::resolve(config.total_iters, &config.schedule)?;
        let field = FieldState::new(config.field_config(set), config.seed)?;
        let camera = CameraState::new(set.intrinsics, set.poses.clone(), schedule.t_c, config.tie_focal);
        let field_opt = Adam::new(field.params.num_params(), config.adam);
        let camera_opt = Adam::new(camera.learnables().len(), config.adam);
        Self::assemble(config, set, schedule, field, camera, field_opt, camera_opt, 0, Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        set: &'a PosedImageSet,
        schedule: ScheduleState,
        field: FieldState<f32>,
        camera: CameraState<f32>,
        field_opt: Adam,
        camera_opt: Adam,
        iteration: usize,
        log: Vec<LogRow>,
    ) -> Result<Self> {
        if camera.num_views() != set.num_views() {
            return Err(Error::invalid(format!(
                "camera state has {} views, dataset has {}",
                camera.num_views(),
                set.num_views()
            )));
        }
        let render = config.render_config(set);
        render.validate()?;
        let sampler = PixelSampler::new(set)?;
        Ok(Trainer {
            config,
            set,
            schedule,
            render,
            sampler,
            field,
            camera,
            field_opt,
            camera_opt,
            iteration,
            log,
        })
    }

    /// Continues a run from a checkpoint. The dataset must be the one it was trained on.
    pub fn resume(ckpt: Checkpoint, set: &'a PosedImageSet) -> Result<Self> {
        let Checkpoint {
            config,
            iteration,
            field,
            camera,
            field_opt,
            camera_opt,
            log,
        } = ckpt;
        config.validate()?;
        let schedule = ScheduleState::resolve(config.total_iters, &config.schedule)?;
        Self::assemble(config, set, schedule, field, camera, field_opt, camera_opt, iteration, log)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScheduleState {
        &self.schedule
    }

    pub fn render_settings(&self) -> &RenderConfig {
        &self.render
    }

    pub fn field(&self) -> &FieldState<f32> {
        &self.field
    }

    pub fn camera(&self) -> &CameraState<f32> {
        &self.camera
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.total_iters
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Batch drawn at iteration `t`, plus the loss and jitter seeds.
    fn draw(&self, t: usize) -> Result<(Vec<PixelRef>, u64, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(t as u64);
        let pixels = self.sampler.sample(self.config.batch_size, &mut rng)?;
        Ok((pixels, rng.gen(), rng.gen()))
    }

    /// Runs iteration `iteration() + 1`.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(Error::invalid("training already reached total_iters"));
        }
        let t = self.iteration + 1;
        let mode = self.config.ablation_mode;
        let (pixels, loss_seed, jitter_seed) = self.draw(t)?;
        let camera_open = mode.learns_camera() && camera_gate(t, &self.camera);
        let settings = StepSettings {
            iteration: t,
            schedule: &self.schedule,
            render: &self.render,
            s3im: &self.config.s3im,
            terms: mode.terms(),
            anneal_frequency: mode.anneals_frequency(),
            camera_trainable: camera_open,
            loss_seed,
            jitter_seed: Some(jitter_seed),
        };
        let f_max = settings.frequencies(&self.field.config.encoding).0;
        let out = forward_backward(&self.field, &self.camera, self.set, &pixels, &settings)?;

        let total = self.config.total_iters;
        let lr_f = decayed_lr(self.config.lr_field, self.config.lr_field_final, t - 1, total);
        let grads: Vec<&[f32]> = out.field_grads.blocks().into_iter().map(|(_, b)| b).collect();
        self.field_opt.step(self.field.params.blocks_mut(), grads, lr_f);

        let mut cam_grads = out.camera_grads;
        let camera_grad_max_abs = cam_grads.iter().fold(0.0f64, |m, g| m.max(g.abs() as f64));
        if camera_open {
            if !self.config.learn_focal {
                cam_grads[0] = 0.0;
                cam_grads[1] = 0.0;
            }
            let lr_c = decayed_lr(self.config.lr_camera, self.config.lr_camera_final, t - 1, total);
            self.camera_opt.step(vec![self.camera.learnables_mut()], vec![&cam_grads], lr_c);
        }
        self.iteration = t;

        let b = out.breakdown;
        let row = LogRow {
            iter: t,
            mse: b.mse,
            occ: b.occ,
            s3im: b.s3im,
            w_occ: b.w_occ,
            f_max,
            psnr_val: psnr_from_mse(b.mse),
        };
        if t % self.config.log_every == 0 || t == total {
            self.log.push(row);
            info!(
                "iter {t}/{total} mse={:.5e} occ={:.3e} s3im={:.4} w_occ={:.3} f_max={:.2} psnr={:.2}",
                row.mse, row.occ, row.s3im, row.w_occ, row.f_max, row.psnr_val
            );
        }
        Ok(StepRecord {
            row,
            camera_updated: camera_open,
            camera_grad_max_abs,
        })
    }

    /// Steps until `iteration() == stop` (clamped to the run length).
    pub fn run_until(&mut self, stop: usize) -> Result<()> {
        let stop = stop.min(self.config.total_iters);
        while self.iteration < stop {
            self.step()?;
        }
        Ok(())
    }

    /// Runs to completion. With an output directory, writes `checkpoint_XXXXXX.bin`
    /// every checkpoint interval, `checkpoint_final.bin` and `metrics.csv`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let every = self.config.checkpoint_interval();
        while !self.is_finished() {
            self.step()?;
            if let Some(dir) = out_dir {
                if self.iteration % every == 0 || self.is_finished() {
                    let ckpt = self.checkpoint();
                    ckpt.save(&dir.join(format!("checkpoint_{:06}.bin", self.iteration)))?;
                    write_log(&dir.join("metrics.csv"), &self.log)?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("checkpoint_final.bin"))?;
            write_log(&dir.join("metrics.csv"), &self.log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            field: self.field.clone(),
            camera: self.camera.clone(),
            field_opt: self.field_opt.clone(),
            camera_opt: self.camera_opt.clone(),
            log: self.log.clone(),
        }
    }
}

/// Trains from scratch and returns the final checkpoint.
pub fn train(config: TrainConfig, set: &PosedImageSet, out_dir: Option<&Path>) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config, set)?;
    trainer.run(out_dir)?;
    Ok(trainer.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::encoding::EncodingConfig;
    use crate::scene::{synthesize_dataset, SceneFile};

    pub(crate) fn tiny_config(mode: AblationMode, iters: usize) -> TrainConfig {
        TrainConfig {
            total_iters: iters,
            batch_size: 64,
            samples_per_ray: 8,
            ablation_mode: mode,
            s3im: S3imConfig {
                patch_side: 4,
                patch_count: None,
                window: 2,
                stride: None,
            },
            field: FieldConfig {
                encoding: EncodingConfig {
                    pos_freqs: 4,
                    dir_freqs: 2,
                    ..Default::default()
                },
                depth: 2,
                width: 16,
                skip_layer: None,
                ..Default::default()
            },
            log_every: 5,
            ..Default::default()
        }
    }

    fn tiny_set() -> PosedImageSet {
        let mut file = SceneFile::cluttered_desk(4, 12, vec![3]);
        file.samples_per_ray = 16;
        synthesize_dataset(&file).unwrap()
    }

    #[test]
    fn mode_gating_matrix() {
        let set = tiny_set();
        for mode in AblationMode::ALL {
            let mut tr = Trainer::new(tiny_config(mode, 30), &set).unwrap();
            let mut cam_moved = false;
            while !tr.is_finished() {
                let rec = tr.step().unwrap();
                if !mode.learns_camera() {
                    assert_eq!(rec.camera_grad_max_abs, 0.0);
                }
                cam_moved |= rec.camera_updated;
            }
            assert_eq!(cam_moved, mode.learns_camera(), "{mode:?}");
            for r in tr.log() {
                assert_eq!(r.occ > 0.0, mode.terms().occlusion, "{mode:?} {r:?}");
                assert_eq!(r.s3im != 0.0, mode.terms().s3im, "{mode:?} {r:?}");
            }
        }
    }

    #[test]
    fn same_seed_same_log() {
        let set = tiny_set();
        let a = train(tiny_config(AblationMode::PlusS3im, 20), &set, None).unwrap();
        let b = train(tiny_config(AblationMode::PlusS3im, 20), &set, None).unwrap();
        assert_eq!(a.log, b.log);
        let mut other = tiny_config(AblationMode::PlusS3im, 20);
        other.seed = 1;
        let c = train(other, &set, None).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn loss_decreases() {
        let mut file = SceneFile::cluttered_desk(4, 12, vec![3]);
        file.samples_per_ray = 16;
        for p in &mut file.primitives {
            p.texture = None;
        }
        let set = synthesize_dataset(&file).unwrap();
        let mut cfg = tiny_config(AblationMode::MaskedNerf, 400);
        cfg.lr_field = 5e-3;
        cfg.lr_field_final = 1e-3;
        cfg.field.width = 32;
        let ck = train(cfg, &set, None).unwrap();
        let mean = |r: &[LogRow]| r.iter().map(|r| r.mse).sum::<f64>() / r.len() as f64;
        let first = mean(&ck.log[..5]);
        let last = mean(&ck.log[ck.log.len() - 5..]);
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"total_iters": 10, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let c: TrainConfig = serde_json::from_str(r#"{"ablation_mode": "+oar"}"#).unwrap();
        assert_eq!(c.ablation_mode, AblationMode::PlusOar);
    }

    #[test]
    fn frustum_box_contains_cameras() {
        let set = tiny_set();
        let (c, r) = frustum_bounds(&set);
        for p in &set.poses {
            for z in [set.near, 0.5 * (set.near + set.far), set.far] {
                let q = p.translation + p.rotation * Vector3::new(0.0, 0.0, z);
                for k in 0..3 {
                    assert!((q[k] - c[k]).abs() <= r + 1e-9);
                }
            }
        }
    }
}
