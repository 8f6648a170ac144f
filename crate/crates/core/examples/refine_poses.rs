//! Perturbs the desk cameras, trains with learnable camera residuals, and
//! reports how much of the injected pose error is removed.
//!
//! cargo run --example refine_poses -- 2000

use declutter::camera::Pose;
use declutter::field::{EncodingConfig, FieldConfig};
use declutter::scene::{perturb_poses, pose_error, synthesize_dataset, SceneFile};
use declutter::trainer::{AblationMode, TrainConfig, Trainer};
use nalgebra::Vector3;

fn mean_error(pose: impl Fn(usize) -> Pose, truth: &[Pose], views: &[usize]) -> (f64, f64) {
    let n = views.len() as f64;
    let (r, c) = views.iter().fold((0.0, 0.0), |(r, c), &v| {
        let (dr, dc) = pose_error(&pose(v), &truth[v]);
        (r + dr, c + dc)
    });
    (r / n, c / n)
}

fn main() -> declutter::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let file = SceneFile::cluttered_desk(9, 48, vec![4]);
    let truth = file.rig();
    let scale = truth.scene_scale(&Vector3::new(0.0, 0.0, 1.0));
    let noisy = perturb_poses(&truth, 2.0, 0.02 * scale, 11)?;
    let mut set = synthesize_dataset(&file)?;
    set.poses = noisy.poses.clone();
    let views = set.training_views();

    let cfg = TrainConfig {
        total_iters: iters,
        batch_size: 128,
        samples_per_ray: 32,
        lr_field: 5e-3,
        lr_field_final: 5e-4,
        learn_focal: false,
        ablation_mode: AblationMode::PlusCamera,
        field: FieldConfig {
            encoding: EncodingConfig { pos_freqs: 4, dir_freqs: 2, ..Default::default() },
            depth: 4,
            width: 64,
            skip_layer: Some(2),
            ..Default::default()
        },
        log_every: iters.div_ceil(10),
        ..Default::default()
    };
    let (r0, c0) = mean_error(|v| noisy.poses[v].clone(), &truth.poses, &views);
    println!("injected: rotation {:.3} deg, center {c0:.4}", r0.to_degrees());
    let mut trainer = Trainer::new(cfg, &set)?;
    println!("camera gate opens at iteration {}", trainer.schedule().t_c);
    while !trainer.is_finished() {
        trainer.run_until(trainer.iteration() + iters.div_ceil(10))?;
        let (r, c) = mean_error(|v| trainer.camera().effective_pose(v), &truth.poses, &views);
        println!(
            "iter {:>5}: rotation {:.3} deg ({:+.0}%), center {c:.4} ({:+.0}%)",
            trainer.iteration(),
            r.to_degrees(),
            100.0 * (r / r0 - 1.0),
            100.0 * (c / c0 - 1.0)
        );
    }
    Ok(())
}
