//! Trains a small field on the desk scene with occluder masks, then scores
//! the holdout view against an occluder-free render of the scene.
//!
//! cargo run --release --example train_occluded -- 1500

use declutter::eval::{psnr_masked, render_view, ssim_masked};
use declutter::field::{EncodingConfig, FieldConfig};
use declutter::losses::S3imConfig;
use declutter::scene::{render_oracle, synthesize_dataset, Quadrature, SceneFile};
use declutter::trainer::{AblationMode, TrainConfig, Trainer};

fn main() -> declutter::Result<()> {
    let iters = std::env::args().nth(1).map_or(1500, |s| s.parse().expect("iteration count"));
    let file = SceneFile::cluttered_desk(9, 32, vec![4]);
    let set = synthesize_dataset(&file)?;
    let cfg = TrainConfig {
        total_iters: iters,
        batch_size: 128,
        samples_per_ray: 32,
        lr_field: 5e-3,
        lr_field_final: 5e-4,
        ablation_mode: AblationMode::PlusS3im,
        s3im: S3imConfig {
            patch_side: 8,
            window: 4,
            ..Default::default()
        },
        field: FieldConfig {
            encoding: EncodingConfig {
                pos_freqs: 8,
                dir_freqs: 4,
                ..Default::default()
            },
            depth: 4,
            width: 64,
            skip_layer: Some(2),
            ..Default::default()
        },
        log_every: 100,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg, &set)?;
    while !trainer.is_finished() {
        let rec = trainer.step()?;
        if rec.row.iter % 100 == 0 {
            println!(
                "iter {:>5}  mse {:.5}  occ {:.2e}  s3im {:.4}  f_max {:.2}",
                rec.row.iter, rec.row.mse, rec.row.occ, rec.row.s3im, rec.row.f_max
            );
        }
    }
    let oracle = render_oracle(&file.scene(), &file.rig(), 4, 256, false, Quadrature::Midpoint)?;
    let cam = trainer.camera();
    let img = render_view(trainer.field(), &cam.effective_pose(4), &cam.intrinsics(), set.resolution(), trainer.render_settings())?;
    println!(
        "holdout vs clean scene: PSNR {:.2} dB, SSIM {:.4}",
        psnr_masked(&img, &oracle, None)?,
        ssim_masked(&img, &oracle, None, 7)?
    );
    img.save_png(std::path::Path::new("holdout_render.png"))?;
    Ok(())
}
