//! Learnable camera residuals: perturbs a rig, shows the gate, and checks that
//! rays through a pixel hit the point that projects there.

use declutter::camera::{camera_gate, project, unproject, CameraState, PixelRef};
use declutter::scene::{perturb_poses, pose_error, SceneFile};
use nalgebra::Vector3;

fn main() -> declutter::Result<()> {
    let file = SceneFile::cluttered_desk(5, 32, vec![]);
    let rig = file.rig();
    let noisy = perturb_poses(&rig, 2.0, 0.1, 7)?;
    let mut cam = CameraState::<f64>::new(rig.intrinsics, noisy.poses.clone(), 200, false);
    println!("gate open at t=199: {}, t=200: {}", camera_gate(199, &cam), camera_gate(200, &cam));

    for v in 0..rig.num_views() {
        let (rot, center) = pose_error(&cam.effective_pose(v), &rig.poses[v]);
        println!("view {v}: {:.3} deg, {:.4} units off", rot.to_degrees(), center);
    }

    // Undo view 0's perturbation through the residuals.
    let truth = &rig.poses[0];
    let base = &noisy.poses[0];
    let delta = truth.rotation * base.rotation.transpose();
    let w = nalgebra::Rotation3::from_matrix_unchecked(delta).scaled_axis();
    cam.set_rotation(0, w);
    cam.set_translation(0, truth.translation - base.translation);
    let (rot, center) = pose_error(&cam.effective_pose(0), truth);
    println!("view 0 after correction: {:.2e} rad, {:.2e} units", rot, center);

    let px = PixelRef::new(0, 11, 20);
    let p = unproject(truth, &rig.intrinsics, px.center(), 3.5);
    let (xy, depth) = project(truth, &rig.intrinsics, &p).expect("in front");
    println!("pixel {:?} -> {:?} at depth {depth:.3}", px.center(), xy);
    println!("point {:?}", p - Vector3::zeros());
    Ok(())
}
