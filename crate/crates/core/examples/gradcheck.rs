//! Finite-difference check of the full training objective on a tiny problem.

use declutter::camera::CameraState;
use declutter::field::{EncodingConfig, FieldConfig, FieldState, RenderConfig};
use declutter::gradcheck::{gradient_check, DEFAULT_EPS};
use declutter::losses::{LossTerms, S3imConfig, ScheduleConfig, ScheduleState};
use declutter::pipeline::StepSettings;
use declutter::sampler::sample_batch;
use declutter::scene::{synthesize_dataset, SceneFile};
use nalgebra::Vector3;

fn main() -> declutter::Result<()> {
    let mut file = SceneFile::cluttered_desk(3, 16, vec![]);
    file.samples_per_ray = 32;
    let set = synthesize_dataset(&file)?;
    let field = FieldState::<f64>::new(
        FieldConfig {
            encoding: EncodingConfig {
                pos_freqs: 4,
                dir_freqs: 2,
                ..Default::default()
            },
            depth: 3,
            width: 16,
            skip_layer: Some(2),
            scene_radius: 4.0,
            ..Default::default()
        },
        0,
    )?;
    let schedule = ScheduleState::resolve(1000, &ScheduleConfig::default())?;
    let mut camera = CameraState::new(set.intrinsics, set.poses.clone(), schedule.t_c, false);
    camera.set_rotation(1, Vector3::new(0.01, 0.0, -0.02));
    let render = RenderConfig {
        samples_per_ray: 16,
        near: set.near,
        far: set.far,
        stratified: true,
        white_background: false,
    };
    let s3im = S3imConfig {
        patch_side: 4,
        window: 2,
        ..Default::default()
    };
    let pixels = sample_batch(&set, 16, 0)?;
    for t in [schedule.t_c - 1, schedule.t_c + 50] {
        let settings = StepSettings {
            iteration: t,
            schedule: &schedule,
            render: &render,
            s3im: &s3im,
            terms: LossTerms {
                occlusion: true,
                s3im: true,
            },
            anneal_frequency: true,
            camera_trainable: true,
            loss_seed: 1,
            jitter_seed: Some(2),
        };
        let r = gradient_check(&field, &camera, &set, &pixels, &settings, DEFAULT_EPS, 40, 0)?;
        println!(
            "t={t}: field max rel err {:.2e} ({} params), camera {:.2e} ({} params), gated zero {:?}",
            r.field_max_relative_error, r.field_checked, r.camera_max_relative_error, r.camera_checked, r.camera_gated_zero
        );
    }
    Ok(())
}
