//! Stochastic structural similarity on a batch of rays as noise grows.

use declutter::losses::{s3im, s3im_loss, S3imConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> declutter::Result<()> {
    let rays = 1024;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = Array2::from_shape_fn((rays, 3), |(i, c)| (((i * 7 + c * 3) % 29) as f64 / 29.0) * 0.8 + 0.1);
    let cfg = S3imConfig {
        patch_side: 16,
        window: 4,
        ..Default::default()
    };
    println!("patches per batch: {}", cfg.patches_for(rays));
    for sigma in [0.0, 0.01, 0.05, 0.1, 0.3] {
        let pred = gt.mapv(|v| v + sigma * rng.gen_range(-1.0..1.0));
        println!(
            "noise {sigma:<4}: s3im {:.4}  loss {:.4}",
            s3im(pred.view(), gt.view(), &cfg, 9)?,
            s3im_loss(pred.view(), gt.view(), &cfg, 9)?
        );
    }
    Ok(())
}
