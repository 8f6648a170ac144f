//! Loss terms: masked photometric MSE, annealed near-camera density penalty,
//! and stochastic structural similarity over regrouped rays.

pub mod schedule;
pub mod ssim;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
pub use schedule::{frequency_max, occ_weight, schedule_coupling, ScheduleConfig, ScheduleState};
pub use ssim::{ssim_windows, SsimWindow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S3imConfig {
    /// Side `K` of each regrouped patch.
    pub patch_side: usize,
    /// Number of patches `M`; defaults to `floor(B / K²)`.
    pub patch_count: Option<usize>,
    pub window: usize,
    /// Defaults to `window` (non-overlapping windows).
    pub stride: Option<usize>,
}

impl Default for S3imConfig {
    fn default() -> Self {
        S3imConfig {
            patch_side: 64,
            patch_count: None,
            window: 4,
            stride: None,
        }
    }
}

impl S3imConfig {
    pub fn ssim_window(&self) -> SsimWindow {
        SsimWindow::new(self.window, self.stride.unwrap_or(self.window))
    }

    pub fn patches_for(&self, rays: usize) -> usize {
        self.patch_count
            .unwrap_or(rays / (self.patch_side * self.patch_side).max(1))
    }

    pub fn validate(&self, rays: usize) -> Result<()> {
        let k2 = self.patch_side * self.patch_side;
        if self.patch_side == 0 || self.window == 0 || self.patch_side % self.window != 0 {
            return Err(Error::Config(format!(
                "s3im.patch_side {} must be a positive multiple of s3im.window {}",
                self.patch_side, self.window
            )));
        }
        let m = self.patches_for(rays);
        if m == 0 || m * k2 > rays {
            return Err(Error::Config(format!(
                "s3im needs M·K² = {}·{k2} rays but the batch has {rays}",
                m.max(1)
            )));
        }
        Ok(())
    }
}

/// Mean squared error over every ray channel.
pub fn masked_mse<S: Real>(pred: ArrayView2<S>, gt: ArrayView2<S>) -> Result<f64> {
    Ok(masked_mse_grad(pred, gt, false)?.0)
}

fn masked_mse_grad<S: Real>(pred: ArrayView2<S>, gt: ArrayView2<S>, want_grad: bool) -> Result<(f64, Option<Array2<S>>)> {
    if pred.is_empty() {
        return Err(Error::invalid("mse of an empty batch"));
    }
    if pred.dim() != gt.dim() {
        return Err(Error::invalid("mse shape mismatch"));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let d = p.as_f64() - g.as_f64();
        sum += d * d;
    }
    let grad = want_grad.then(|| {
        let mut d = &pred - &gt;
        d.mapv_inplace(|v| v * S::of(2.0 / n));
        d
    });
    Ok((sum / n, grad))
}

/// Number of leading samples covered by the near-camera mask.
pub fn near_sample_count(samples: usize, near_fraction: f64) -> usize {
    ((near_fraction * samples as f64).ceil() as usize).min(samples)
}

/// Mean over rays of `(1/N) Σ_k σ_k m_k` with `m_k = 1` for the first
/// `ceil(ρ N)` samples.
pub fn occ_base<S: Real>(sigma: ArrayView2<S>, near_fraction: f64) -> f64 {
    let (rays, n) = sigma.dim();
    if rays == 0 || n == 0 {
        return 0.0;
    }
    let k = near_sample_count(n, near_fraction);
    let total: f64 = sigma
        .outer_iter()
        .map(|row| row.iter().take(k).map(|v| v.as_f64()).sum::<f64>())
        .sum();
    total / (n * rays) as f64
}

/// Annealed occlusion loss `w_occ(t) · occ_base`.
pub fn occ_loss<S: Real>(sigma: ArrayView2<S>, t: usize, s: &ScheduleState) -> f64 {
    occ_weight(t, s) * occ_base(sigma, s.occ_near_fraction)
}

/// SSIM between two `K × K × 3` patches using the configured windows.
pub fn ssim_patch<S: Real>(a: ArrayView3<S>, b: ArrayView3<S>, cfg: &S3imConfig) -> Result<f64> {
    let k = cfg.patch_side;
    if k % cfg.window.max(1) != 0 {
        return Err(Error::invalid(format!("patch side {k} not divisible by window {}", cfg.window)));
    }
    if a.dim() != (k, k, 3) || b.dim() != (k, k, 3) {
        return Err(Error::invalid(format!("ssim_patch expects {k}x{k}x3 inputs")));
    }
    Ok(ssim_windows(a, b, cfg.ssim_window(), false)?.0)
}

/// Seeded ray order used to regroup a batch of `rays` into patches.
pub fn s3im_permutation(rays: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rays).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn gather_patch<S: Real>(rays: ArrayView2<S>, idx: &[usize], k: usize) -> Array3<S> {
    Array3::from_shape_fn((k, k, 3), |(y, x, c)| rays[[idx[y * k + x], c]])
}

fn s3im_impl<S: Real>(
    pred: ArrayView2<S>,
    gt: ArrayView2<S>,
    cfg: &S3imConfig,
    seed: u64,
    want_grad: bool,
) -> Result<(f64, Option<Array2<S>>)> {
    let rays = pred.nrows();
    if gt.dim() != pred.dim() || pred.ncols() != 3 {
        return Err(Error::invalid("s3im expects matching B×3 inputs"));
    }
    let k = cfg.patch_side;
    let k2 = k * k;
    let m = cfg.patches_for(rays);
    if m == 0 || m * k2 > rays {
        return Err(Error::invalid(format!(
            "s3im needs {} rays for {} patches of {k}x{k}, got {rays}",
            m.max(1) * k2,
            m.max(1)
        )));
    }
    let order = s3im_permutation(rays, seed);
    let mut grad = want_grad.then(|| Array2::<S>::zeros((rays, 3)));
    let mut total = 0.0;
    for p in 0..m {
        let idx = &order[p * k2..(p + 1) * k2];
        let a = gather_patch(pred, idx, k);
        let b = gather_patch(gt, idx, k);
        let (v, g) = ssim_windows(a.view(), b.view(), cfg.ssim_window(), want_grad)?;
        total += v;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (i, &r) in idx.iter().enumerate() {
                for c in 0..3 {
                    acc[[r, c]] += g[[i / k, i % k, c]] * S::of(1.0 / m as f64);
                }
            }
        }
    }
    Ok((total / m as f64, grad))
}

/// Mean SSIM over `M` patches of `K × K` rays regrouped by a seeded permutation.
pub fn s3im<S: Real>(pred: ArrayView2<S>, gt: ArrayView2<S>, cfg: &S3imConfig, seed: u64) -> Result<f64> {
    Ok(s3im_impl(pred, gt, cfg, seed, false)?.0)
}

/// `1 − s3im`, in `[0, 2]`.
pub fn s3im_loss<S: Real>(pred: ArrayView2<S>, gt: ArrayView2<S>, cfg: &S3imConfig, seed: u64) -> Result<f64> {
    Ok(1.0 - s3im(pred, gt, cfg, seed)?)
}

/// Which optional terms participate in the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LossTerms {
    pub occlusion: bool,
    pub s3im: bool,
}

/// Per-term values for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub occ_base: f64,
    /// `w_occ(t) · occ_base`.
    pub occ: f64,
    /// `1 − s3im`.
    pub s3im: f64,
    pub w_occ: f64,
    pub total: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "mse={:.6e} occ={:.6e} s3im={:.6e} w_occ={:.4} total={:.6e}",
            self.mse, self.occ, self.s3im, self.w_occ, self.total
        )
    }
}

pub struct LossEval<S> {
    pub breakdown: LossBreakdown,
    /// Gradient with respect to rendered ray colors.
    pub d_rgb: Option<Array2<S>>,
    /// Gradient with respect to per-sample densities (occlusion term only).
    pub d_sigma: Option<Array2<S>>,
}

/// `mse + w_occ_coeff · occ_loss + w_s3im · s3im_loss`, with optional gradients.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Real>(
    rgb: ArrayView2<S>,
    sigma: ArrayView2<S>,
    gt: ArrayView2<S>,
    t: usize,
    s: &ScheduleState,
    cfg: &S3imConfig,
    terms: LossTerms,
    seed: u64,
    want_grad: bool,
) -> Result<LossEval<S>> {
    let (mse, mut d_rgb) = masked_mse_grad(rgb, gt, want_grad)?;
    let mut b = LossBreakdown {
        mse,
        ..Default::default()
    };
    let mut d_sigma = None;
    if terms.occlusion {
        b.w_occ = occ_weight(t, s);
        b.occ_base = occ_base(sigma, s.occ_near_fraction);
        b.occ = b.w_occ * b.occ_base;
        if want_grad {
            let (rays, n) = sigma.dim();
            let k = near_sample_count(n, s.occ_near_fraction);
            let g = S::of(s.w_occ_coeff * b.w_occ / (n * rays) as f64);
            let mut d = Array2::zeros((rays, n));
            d.columns_mut().into_iter().take(k).for_each(|mut col| col.fill(g));
            d_sigma = Some(d);
        }
    }
    if terms.s3im {
        let (v, g) = s3im_impl(rgb, gt, cfg, seed, want_grad)?;
        b.s3im = 1.0 - v;
        if let (Some(acc), Some(g)) = (d_rgb.as_mut(), g) {
            acc.scaled_add(S::of(-s.w_s3im), &g);
        }
    }
    b.total = b.mse + s.w_occ_coeff * b.occ + s.w_s3im * b.s3im;
    Ok(LossEval {
        breakdown: b,
        d_rgb,
        d_sigma,
    })
}
