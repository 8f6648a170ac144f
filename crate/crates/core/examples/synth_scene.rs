//! Renders the cluttered desk scene into a dataset directory and reports how
//! much of each view the moving occluder covers.
//!
//! cargo run --example synth_scene -- /tmp/desk [--static]

use std::path::PathBuf;

use declutter::dataset::save_dataset;
use declutter::scene::{synthesize_dataset, SceneFile};

fn main() -> declutter::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let still = args.iter().any(|a| a == "--static");
    let out = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map_or_else(|| PathBuf::from("desk"), PathBuf::from);
    let mut file = SceneFile::cluttered_desk(9, 48, vec![4]);
    if still {
        // A parked occluder keeps the point cloud valid for prompt propagation.
        file.primitives[0].motion = [0.0; 3];
        file.primitives[0].center[0] = 0.0;
    }
    let set = synthesize_dataset(&file)?;
    save_dataset(&set, &out)?;
    file.save(&out.join("scene.json"))?;
    for (v, m) in set.masks.iter().enumerate() {
        let frac = m.occluded_count() as f64 / (m.width * m.height) as f64;
        let tag = if set.is_holdout(v) { " (holdout)" } else { "" };
        println!("view {v}: occluder covers {:5.1}%{tag}", 100.0 * frac);
    }
    println!("wrote {}", out.display());
    Ok(())
}
