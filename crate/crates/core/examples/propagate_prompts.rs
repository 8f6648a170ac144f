//! Carries a click on the occluder in one view to every other view through a
//! sparse point cloud, then checks where the propagated prompts land.

use declutter::camera::project;
use declutter::dataset::propagate_prompts;
use declutter::scene::{occluder_mask, sparse_cloud, synthesize_dataset, SceneFile};
use nalgebra::Vector3;

fn main() -> declutter::Result<()> {
    let mut file = SceneFile::cluttered_desk(8, 48, vec![]);
    // Hold the occluder still in the middle of the track so every view sees it.
    file.primitives[0].motion = [0.0; 3];
    file.primitives[0].center[0] = 0.0;
    let (scene, rig) = (file.scene(), file.rig());
    let set = synthesize_dataset(&file)?;
    let cloud = sparse_cloud(&scene, &rig, 2)?;
    println!("sparse cloud: {} points", cloud.points.len());

    let occ = Vector3::from(scene.primitives[0].center);
    let (click, _) = project(&rig.poses[0], &rig.intrinsics, &occ).expect("occluder in view 0");
    let out = propagate_prompts(&[click], 0, &cloud, &set, 8.0)?;
    println!("click {:?} matched point {:?}", click, out.matched_points[0]);

    let mut hits = 0;
    for (v, prompts) in out.per_view.iter().enumerate() {
        let mask = occluder_mask(&scene, &rig, v)?;
        for p in prompts {
            let inside = mask.is_occluded(p[0] as usize, p[1] as usize);
            hits += usize::from(inside);
            println!("view {v}: ({:5.1}, {:5.1}) inside occluder: {inside}", p[0], p[1]);
        }
    }
    println!("{hits}/{} propagated prompts on the occluder", rig.num_views());
    Ok(())
}
