//! Per-view uniform ray sampling over valid pixels, and long-tail statistics of
//! pixel and patch visibility.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::PixelRef;
use crate::dataset::PosedImageSet;
use crate::error::{Error, Result};

/// Valid pixels of every training view, precomputed once.
#[derive(Clone, Debug)]
pub struct PixelSampler {
    views: Vec<usize>,
    valid: Vec<Vec<(u32, u32)>>,
}

impl PixelSampler {
    pub fn new(set: &PosedImageSet) -> Result<Self> {
        let views = set.training_views();
        let mut valid = Vec::with_capacity(views.len());
        for &v in &views {
            let m = &set.masks[v];
            let list: Vec<(u32, u32)> = (0..m.height)
                .flat_map(|y| (0..m.width).map(move |x| (x, y)))
                .filter(|&(x, y)| !m.is_occluded(x, y))
                .map(|(x, y)| (x as u32, y as u32))
                .collect();
            if list.is_empty() {
                return Err(Error::invalid(format!("view {v} has no valid pixels")));
            }
            valid.push(list);
        }
        Ok(PixelSampler { views, valid })
    }

    pub fn views(&self) -> &[usize] {
        &self.views
    }

    /// `floor(B / V)` pixels per view, plus one extra for the first `B mod V`
    /// views. Without replacement unless a view has too few valid pixels.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<PixelRef>> {
        let v = self.views.len();
        if batch < v {
            return Err(Error::invalid(format!("batch size {batch} is smaller than the {v} training views")));
        }
        let base = batch / v;
        let extra = batch % v;
        let mut out = Vec::with_capacity(batch);
        for (i, (&view, list)) in self.views.iter().zip(&self.valid).enumerate() {
            let count = base + usize::from(i < extra);
            if list.len() >= count {
                for j in index::sample(rng, list.len(), count) {
                    let (x, y) = list[j];
                    out.push(PixelRef::new(view, x, y));
                }
            } else {
                for _ in 0..count {
                    let (x, y) = list[rng.gen_range(0..list.len())];
                    out.push(PixelRef::new(view, x, y));
                }
            }
        }
        Ok(out)
    }
}

/// One seeded batch from `set`.
pub fn sample_batch(set: &PosedImageSet, batch: usize, seed: u64) -> Result<Vec<PixelRef>> {
    PixelSampler::new(set)?.sample(batch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Pixel counts per visibility value `x ∈ [1, x_max]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisibilityHistogram {
    pub counts: BTreeMap<u32, f64>,
    pub x_max: u32,
    pub fitted_alpha: Option<f64>,
}

impl VisibilityHistogram {
    /// Histogram of observed values. Zero visibility is dropped since the
    /// model is defined on `[1, x_max]`.
    pub fn from_values(values: impl IntoIterator<Item = u32>, x_max: u32) -> Self {
        let mut counts = BTreeMap::new();
        for x in values.into_iter().filter(|&x| x >= 1) {
            *counts.entry(x).or_insert(0.0) += 1.0;
        }
        VisibilityHistogram {
            counts,
            x_max,
            fitted_alpha: None,
        }
    }

    /// Exact masses `P(x) ∝ (x_max − x + 1)^(−α)`, scaled to `total`.
    pub fn from_model(alpha: f64, x_max: u32, total: f64) -> Self {
        let raw: Vec<f64> = (1..=x_max)
            .map(|x| ((x_max - x + 1) as f64).powf(-alpha))
            .collect();
        let z: f64 = raw.iter().sum();
        let counts = (1..=x_max).zip(raw).map(|(x, p)| (x, total * p / z)).collect();
        VisibilityHistogram {
            counts,
            x_max,
            fitted_alpha: None,
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    /// `(x, count, P(x))` rows.
    pub fn rows(&self) -> Vec<(u32, f64, f64)> {
        let total = self.total();
        self.counts.iter().map(|(&x, &c)| (x, c, c / total)).collect()
    }

    pub fn fit(&mut self) -> Result<f64> {
        let a = fit_longtail(self)?;
        self.fitted_alpha = Some(a);
        Ok(a)
    }
}

/// Least-squares slope of `log P(x)` against `log(x_max − x + 1)` over the
/// nonzero bins; returns `α = −slope`.
pub fn fit_longtail(hist: &VisibilityHistogram) -> Result<f64> {
    let total = hist.total();
    let pts: Vec<(f64, f64)> = hist
        .counts
        .iter()
        .filter(|(&x, &c)| c > 0.0 && x >= 1 && x <= hist.x_max)
        .map(|(&x, &c)| (((hist.x_max - x + 1) as f64).ln(), (c / total).ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::invalid(format!(
            "long-tail fit needs at least 3 distinct visibility values, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mu = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mv = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(u, v)| (u - mu) * (v - mv)).sum();
    let sxx: f64 = pts.iter().map(|(u, _)| (u - mu) * (u - mu)).sum();
    Ok(-sxy / sxx)
}

/// Mean visibility of the pixels in a patch.
pub fn patch_visibility(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("patch_visibility of an empty patch"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Shuffle and split, as the structural loss does.
    WithoutReplacement,
    /// Independent draws per member.
    WithReplacement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSummary {
    pub patch_side: usize,
    pub patches: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
    pub pixel_mean: f64,
    pub pixel_variance: f64,
    /// `Var(patch) / Var(pixel)`.
    pub variance_ratio: f64,
    /// Patch visibility `y` (keyed by `K² y`, an integer) to frequency.
    pub q_histogram: BTreeMap<u64, usize>,
    /// Patches whose visibility escaped `[min, max]` of their members.
    pub bound_violations: usize,
}

impl PatchSummary {
    /// `(y, Q(y))` pairs.
    pub fn q_distribution(&self) -> Vec<(f64, f64)> {
        let k2 = (self.patch_side * self.patch_side) as f64;
        let n = self.patches as f64;
        self.q_histogram
            .iter()
            .map(|(&s, &c)| (s as f64 / k2, c as f64 / n))
            .collect()
    }
}

fn variance(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Groups pixel visibilities into `m` patches of `k²` pixels per trial and
/// summarizes the patch-level distribution across `trials`.
pub fn patch_distribution(
    pixel_vis: &[u32],
    k: usize,
    m: usize,
    trials: usize,
    seed: u64,
    grouping: Grouping,
) -> Result<PatchSummary> {
    let k2 = k * k;
    if k == 0 || m == 0 || trials == 0 {
        return Err(Error::invalid("patch_distribution needs k, m and trials >= 1"));
    }
    if pixel_vis.len() < k2 {
        return Err(Error::invalid(format!("{} pixels cannot fill a {k}x{k} patch", pixel_vis.len())));
    }
    if grouping == Grouping::WithoutReplacement && m * k2 > pixel_vis.len() {
        return Err(Error::invalid(format!(
            "{m} patches of {k2} pixels exceed the {} available without replacement",
            pixel_vis.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pixel_vis.len()).collect();
    let mut sums = Vec::with_capacity(m * trials);
    let mut violations = 0;
    let mut members = vec![0u32; k2];
    for _ in 0..trials {
        if grouping == Grouping::WithoutReplacement {
            order.shuffle(&mut rng);
        }
        for p in 0..m {
            for (j, slot) in members.iter_mut().enumerate() {
                let idx = match grouping {
                    Grouping::WithoutReplacement => order[p * k2 + j],
                    Grouping::WithReplacement => rng.gen_range(0..pixel_vis.len()),
                };
                *slot = pixel_vis[idx];
            }
            let sum: u64 = members.iter().map(|&v| v as u64).sum();
            let y = sum as f64 / k2 as f64;
            let lo = *members.iter().min().expect("nonempty") as f64;
            let hi = *members.iter().max().expect("nonempty") as f64;
            if y < lo || y > hi {
                violations += 1;
            }
            sums.push(sum);
        }
    }
    let ys = sums.iter().map(|&s| s as f64 / k2 as f64);
    let (mean, var) = variance(ys.clone());
    let (pixel_mean, pixel_variance) = variance(pixel_vis.iter().map(|&v| v as f64));
    let mut q_histogram = BTreeMap::new();
    for &s in &sums {
        *q_histogram.entry(s).or_insert(0) += 1;
    }
    Ok(PatchSummary {
        patch_side: k,
        patches: sums.len(),
        mean,
        variance: var,
        min: ys.clone().fold(f64::INFINITY, f64::min),
        max: ys.fold(f64::NEG_INFINITY, f64::max),
        pixel_mean,
        pixel_variance,
        variance_ratio: if pixel_variance > 0.0 { var / pixel_variance } else { 0.0 },
        q_histogram,
        bound_violations: violations,
    })
}

/// Visibility estimate without geometry: for each pixel position, the number
/// of views whose mask marks it valid. An approximation for real captures.
pub fn mask_visibility(set: &PosedImageSet) -> Vec<u32> {
    let (w, h) = set.resolution();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| set.masks.iter().filter(|m| !m.is_occluded(x, y)).count() as u32)
        .collect()
}

/// Draws `n` visibility values from the discrete long-tail model.
pub fn sample_longtail(alpha: f64, x_max: u32, n: usize, seed: u64) -> Vec<u32> {
    let hist = VisibilityHistogram::from_model(alpha, x_max, 1.0);
    let cdf: Vec<(u32, f64)> = hist
        .counts
        .iter()
        .scan(0.0, |acc, (&x, &p)| {
            *acc += p;
            Some((x, *acc))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            cdf.iter().find(|(_, c)| u < *c).map_or(x_max, |(x, _)| *x)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::dataset::{Mask, RgbImage};
    use proptest::prelude::*;

    fn set(views: usize, w: usize, h: usize) -> PosedImageSet {
        PosedImageSet {
            images: vec![RgbImage::new(w, h); views],
            masks: vec![Mask::new(w, h); views],
            intrinsics: Intrinsics::centered(w as f64, w, h),
            poses: vec![Pose::identity(); views],
            near: 1.0,
            far: 2.0,
            holdout_indices: vec![],
        }
    }

    #[test]
    fn even_split_across_views() {
        let s = set(32, 16, 16);
        let batch = sample_batch(&s, 4096, 3).unwrap();
        assert_eq!(batch.len(), 4096);
        for v in 0..32 {
            assert_eq!(batch.iter().filter(|p| p.view == v).count(), 128);
        }
    }

    #[test]
    fn remainder_round_robin_and_masks_respected() {
        let mut s = set(3, 8, 8);
        for x in 0..8 {
            for y in 0..4 {
                s.masks[1].set(x, y, true);
            }
        }
        let batch = sample_batch(&s, 50, 9).unwrap();
        let counts: Vec<usize> = (0..3).map(|v| batch.iter().filter(|p| p.view == v).count()).collect();
        assert_eq!(counts, vec![17, 17, 16]);
        assert!(batch.iter().all(|p| !s.masks[p.view].is_occluded(p.x as usize, p.y as usize)));
        assert_eq!(batch, sample_batch(&s, 50, 9).unwrap());
        assert!(sample_batch(&s, 2, 0).is_err());
    }

    #[test]
    fn holdout_views_never_sampled() {
        let mut s = set(4, 4, 4);
        s.holdout_indices = vec![2];
        let batch = sample_batch(&s, 30, 1).unwrap();
        assert!(batch.iter().all(|p| p.view != 2));
    }

    #[test]
    fn small_view_falls_back_to_replacement() {
        let mut s = set(2, 4, 4);
        for x in 0..4 {
            for y in 0..4 {
                s.masks[0].set(x, y, !(x == 0 && y == 0));
            }
        }
        let batch = sample_batch(&s, 10, 2).unwrap();
        assert_eq!(batch.iter().filter(|p| p.view == 0 && p.x == 0 && p.y == 0).count(), 5);
        s.masks[0].set(0, 0, true);
        assert!(sample_batch(&s, 10, 2).is_err());
    }

    #[test]
    fn exact_model_recovery() {
        for alpha in [1.5, 2.0, 3.0] {
            let h = VisibilityHistogram::from_model(alpha, 16, 1e5);
            assert!((fit_longtail(&h).unwrap() - alpha).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_and_degenerate_histograms() {
        let h = VisibilityHistogram::from_values((1..=10).flat_map(|x| std::iter::repeat(x).take(7)), 10);
        assert!(fit_longtail(&h).unwrap().abs() < 1e-12);
        let d = VisibilityHistogram::from_values(vec![4; 20], 10);
        assert!(fit_longtail(&d).is_err());
    }

    #[test]
    fn patch_visibility_examples() {
        assert_eq!(patch_visibility(&[5.0; 4]).unwrap(), 5.0);
        assert_eq!(patch_visibility(&[1.0, 9.0]).unwrap(), 5.0);
        assert!(patch_visibility(&[]).is_err());
    }

    #[test]
    fn unit_patches_reproduce_pixel_distribution() {
        let vis: Vec<u32> = (0..200).map(|i| 1 + (i * 7 % 13) as u32).collect();
        let s = patch_distribution(&vis, 1, 200, 1, 4, Grouping::WithoutReplacement).unwrap();
        let mut expected = BTreeMap::new();
        for &v in &vis {
            *expected.entry(v as u64).or_insert(0) += 1;
        }
        assert_eq!(s.q_histogram, expected);
        assert!((s.variance_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iid_variance_shrinks_by_patch_area() {
        let vis = sample_longtail(2.0, 16, 4096, 5);
        for k in [2, 4, 8] {
            let s = patch_distribution(&vis, k, 4, 1000, 7, Grouping::WithReplacement).unwrap();
            let target = 1.0 / (k * k) as f64;
            assert!((s.variance_ratio / target - 1.0).abs() < 0.2, "K={k}: {}", s.variance_ratio);
            assert_eq!(s.bound_violations, 0);
        }
    }

    proptest! {
        #[test]
        fn patch_bounds_and_tail_shortening(
            vis in proptest::collection::vec(1u32..=12, 64..256),
            k in 2usize..4,
            seed in 0u64..100,
        ) {
            let m = vis.len() / (k * k);
            let s = patch_distribution(&vis, k, m, 20, seed, Grouping::WithoutReplacement).unwrap();
            prop_assert_eq!(s.bound_violations, 0);
            let distinct: std::collections::BTreeSet<_> = vis.iter().collect();
            if distinct.len() >= 4 {
                prop_assert!(s.variance <= s.pixel_variance);
            }
        }

        #[test]
        fn sampler_counts_differ_by_at_most_one(views in 1usize..6, batch in 6usize..80, seed in 0u64..50) {
            let s = set(views, 6, 5);
            let b = sample_batch(&s, batch, seed).unwrap();
            let counts: Vec<usize> = (0..views).map(|v| b.iter().filter(|p| p.view == v).count()).collect();
            prop_assert_eq!(counts.iter().sum::<usize>(), batch);
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }
}
