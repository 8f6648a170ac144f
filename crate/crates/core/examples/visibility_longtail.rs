//! Oracle pixel visibility on the desk scene, the fitted tail exponent, and
//! how regrouping pixels into patches shortens the tail.

use declutter::sampler::{patch_distribution, Grouping, VisibilityHistogram};
use declutter::scene::{pixel_visibility, SceneFile};

fn main() -> declutter::Result<()> {
    let file = SceneFile::cluttered_desk(12, 32, vec![]);
    let (scene, rig) = (file.scene(), file.rig());
    let mut values = Vec::new();
    for v in 0..rig.num_views() {
        values.extend(pixel_visibility(&scene, &rig, v)?.iter().copied());
    }
    let mut hist = VisibilityHistogram::from_values(values.iter().copied(), rig.num_views() as u32);
    let alpha = hist.fit()?;
    println!("{:>3} {:>7} {:>8}", "x", "count", "P(x)");
    for (x, count, p) in hist.rows() {
        println!("{x:>3} {count:>7} {p:>8.4}");
    }
    println!("fitted alpha = {alpha:.3}");
    for k in [2, 4, 8] {
        let s = patch_distribution(&values, k, 32, 200, 3, Grouping::WithoutReplacement)?;
        println!(
            "K={k}: patch variance / pixel variance = {:.4} (1/K^2 = {:.4}), bound violations {}",
            s.variance_ratio,
            1.0 / (k * k) as f64,
            s.bound_violations
        );
    }
    Ok(())
}
