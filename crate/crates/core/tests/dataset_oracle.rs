use declutter::camera::project;
use declutter::dataset::{load_dataset, propagate_prompts, save_dataset};
use declutter::field::{EncodingConfig, FieldConfig};
use declutter::losses::S3imConfig;
use declutter::scene::{occluder_mask, sparse_cloud, synthesize_dataset, SceneFile};
use declutter::trainer::{train, AblationMode, TrainConfig};
use nalgebra::Vector3;

fn config(iters: usize) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        batch_size: 64,
        samples_per_ray: 8,
        ablation_mode: AblationMode::PlusS3im,
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

#[test]
fn training_never_reads_holdout_pixels() {
    let mut file = SceneFile::cluttered_desk(4, 12, vec![1]);
    file.samples_per_ray = 16;
    let set = synthesize_dataset(&file).unwrap();
    let mut poisoned = set.clone();
    for v in &mut poisoned.images[1].data {
        *v = f32::NAN;
    }
    let clean = train(config(30), &set, None).unwrap();
    let dirty = train(config(30), &poisoned, None).unwrap();
    assert!(dirty.log.iter().all(|r| r.mse.is_finite() && r.s3im.is_finite()));
    assert_eq!(clean, dirty);
}

#[test]
fn prompts_on_the_occluder_land_on_its_mask() {
    let mut file = SceneFile::cluttered_desk(8, 48, vec![]);
    file.samples_per_ray = 16;
    // Hold the occluder still in the middle of the track so every view sees it.
    file.primitives[0].motion = [0.0; 3];
    file.primitives[0].center[0] = 0.0;
    let (scene, rig) = (file.scene(), file.rig());
    let set = synthesize_dataset(&file).unwrap();
    let cloud = sparse_cloud(&scene, &rig, 2).unwrap();

    let center = Vector3::from(scene.primitives[0].center);
    let (click, _) = project(&rig.poses[0], &rig.intrinsics, &center).unwrap();
    let out = propagate_prompts(&[click], 0, &cloud, &set, 8.0).unwrap();
    assert!(out.unmatched.is_empty());

    let mut inside = 0;
    for (v, prompts) in out.per_view.iter().enumerate() {
        let mask = occluder_mask(&scene, &rig, v).unwrap();
        inside += prompts
            .iter()
            .filter(|p| mask.is_occluded(p[0] as usize, p[1] as usize))
            .count();
    }
    let fraction = inside as f64 / rig.num_views() as f64;
    assert!(fraction >= 0.9, "{inside}/{} views", rig.num_views());
}

#[test]
fn dataset_round_trip_through_disk() {
    let mut file = SceneFile::cluttered_desk(3, 10, vec![2]);
    file.samples_per_ray = 16;
    let set = synthesize_dataset(&file).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&set, dir.path()).unwrap();
    let back = load_dataset(dir.path(), 1).unwrap();
    assert_eq!(back.masks, set.masks);
    assert_eq!(back.poses, set.poses);
    assert_eq!(back.holdout_indices, set.holdout_indices);
    for (a, b) in back.images.iter().zip(&set.images) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
