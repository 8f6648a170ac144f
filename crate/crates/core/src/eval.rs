//! Held-out rendering and masked image metrics.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array3};
use serde::Serialize;

use crate::camera::{CameraState, Intrinsics, Pose};
use crate::dataset::{Mask, PosedImageSet, RgbImage};
use crate::error::{Error, Result};
use crate::field::mlp::FieldState;
use crate::field::render::RenderConfig;
use crate::losses::{near_sample_count, ssim_windows, SsimWindow};
use crate::pipeline::{rays_for_pose, render_rays};

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;

fn deterministic(render: &RenderConfig) -> RenderConfig {
    RenderConfig {
        stratified: false,
        ..*render
    }
}

fn full_band(field: &FieldState<f32>) -> (f64, f64) {
    let e = &field.config.encoding;
    (e.pos_freqs as f64, e.dir_freqs as f64)
}

/// Renders a full image at every frequency band with midpoint samples.
pub fn render_view(
    field: &FieldState<f32>,
    pose: &Pose,
    intrinsics: &Intrinsics,
    resolution: (usize, usize),
    render: &RenderConfig,
) -> Result<RgbImage> {
    let (w, h) = resolution;
    let (o, d, s) = rays_for_pose::<f32>(pose, intrinsics, w, h);
    let out = render_rays(field, &o, &d, &s, &deterministic(render), full_band(field), None)?;
    let mut img = RgbImage::new(w, h);
    for (i, px) in img.data.chunks_exact_mut(3).enumerate() {
        for c in 0..3 {
            px[c] = out.rgb[[i, c]];
        }
    }
    Ok(img)
}

/// Mean density over the leading `fraction` of midpoint samples on every pixel ray.
pub fn near_density(
    field: &FieldState<f32>,
    pose: &Pose,
    intrinsics: &Intrinsics,
    resolution: (usize, usize),
    render: &RenderConfig,
    fraction: f64,
) -> Result<f64> {
    let (w, h) = resolution;
    let (o, d, s) = rays_for_pose::<f32>(pose, intrinsics, w, h);
    let out = render_rays(field, &o, &d, &s, &deterministic(render), full_band(field), None)?;
    let k = near_sample_count(render.samples_per_ray, fraction);
    let sum: f64 = out
        .sigma
        .rows()
        .into_iter()
        .map(|r| r.iter().take(k).map(|&v| v as f64).sum::<f64>())
        .sum();
    Ok(sum / (out.sigma.nrows() * k) as f64)
}

fn check_shapes(pred: &RgbImage, gt: &RgbImage, mask: Option<&Mask>) -> Result<()> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if let Some(m) = mask {
        if (m.width, m.height) != (gt.width, gt.height) {
            return Err(Error::invalid("mask size differs from image size"));
        }
    }
    Ok(())
}

/// Pixel pairs `(pred, gt)` whose mask value is 0, in scanline order.
fn valid_pairs(pred: &RgbImage, gt: &RgbImage, mask: Option<&Mask>) -> Result<(Vec<[f32; 3]>, Vec<[f32; 3]>)> {
    check_shapes(pred, gt, mask)?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for y in 0..gt.height {
        for x in 0..gt.width {
            if mask.is_some_and(|m| m.is_occluded(x, y)) {
                continue;
            }
            a.push(pred.get(x, y));
            b.push(gt.get(x, y));
        }
    }
    if a.is_empty() {
        return Err(Error::invalid("mask leaves no valid pixels"));
    }
    Ok((a, b))
}

/// `10·log10(1/MSE)` over pixels with mask 0, capped at [`PSNR_CAP`].
pub fn psnr_masked(pred: &RgbImage, gt: &RgbImage, mask: Option<&Mask>) -> Result<f64> {
    let (a, b) = valid_pairs(pred, gt, mask)?;
    let mut sum = 0.0;
    for (p, g) in a.iter().zip(&b) {
        for c in 0..3 {
            let d = p[c] as f64 - g[c] as f64;
            sum += d * d;
        }
    }
    let mse = sum / (3 * a.len()) as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    })
}

/// Width and height of the most-square rectangle holding `count` pixels.
pub fn rearranged_shape(count: usize) -> (usize, usize) {
    let mut w = (count as f64).sqrt().ceil() as usize;
    while w * w < count {
        w += 1;
    }
    while w > 1 && (w - 1) * (w - 1) >= count {
        w -= 1;
    }
    (w, count.div_ceil(w.max(1)))
}

/// Packs pixels row-major into the most-square rectangle, repeating the last
/// pixel in surplus cells.
pub fn rearrange_valid(pixels: &[[f32; 3]]) -> Result<RgbImage> {
    let last = *pixels.last().ok_or_else(|| Error::invalid("no pixels to rearrange"))?;
    let (w, h) = rearranged_shape(pixels.len());
    let mut img = RgbImage::new(w, h);
    for i in 0..w * h {
        img.set(i % w, i / w, pixels.get(i).copied().unwrap_or(last));
    }
    Ok(img)
}

fn to_array(img: &RgbImage) -> Array3<f64> {
    Array3::from_shape_fn((img.height, img.width, 3), |(y, x, c)| img.get(x, y)[c] as f64)
}

/// Uniform-window SSIM (stride 1) over the rearranged valid pixels of both images.
pub fn ssim_masked(pred: &RgbImage, gt: &RgbImage, mask: Option<&Mask>, window: usize) -> Result<f64> {
    let (a, b) = valid_pairs(pred, gt, mask)?;
    let (ra, rb) = (rearrange_valid(&a)?, rearrange_valid(&b)?);
    if ra.width < window || ra.height < window {
        return Err(Error::invalid(format!(
            "{} valid pixels rearrange to {}x{}, smaller than the {window}x{window} window",
            a.len(),
            ra.width,
            ra.height
        )));
    }
    let (v, _) = ssim_windows::<f64>(
        to_array(&ra).view(),
        to_array(&rb).view(),
        SsimWindow::new(window, 1),
        false,
    )?;
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-holdout-view metrics plus their arithmetic mean in the final row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub average: EvalRow,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("no holdout views to report"));
        }
        let n = rows.len() as f64;
        let average = EvalRow {
            view: "average".into(),
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        };
        Ok(EvalReport { rows, average })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim\n");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(s, "{},{},{}", r.view, r.psnr, r.ssim);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>9} {:>7}\n", "view", "PSNR(dB)", "SSIM");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(s, "{:<10} {:>9.3} {:>7.4}", r.view, r.psnr, r.ssim);
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("eval.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("eval.txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Renders each holdout view with the learned intrinsics and pose, scoring
/// it against the dataset image over the view's valid pixels. Returns the
/// report and the rendered images.
pub fn eval_report(
    field: &FieldState<f32>,
    camera: &CameraState<f32>,
    set: &PosedImageSet,
    render: &RenderConfig,
) -> Result<(EvalReport, Vec<RgbImage>)> {
    let mut rows = Vec::new();
    let mut renders = Vec::new();
    let intr = camera.intrinsics();
    for &v in &set.holdout_indices {
        let img = render_view(field, &camera.effective_pose(v), &intr, set.resolution(), render)?;
        let mask = &set.masks[v];
        rows.push(EvalRow {
            view: v.to_string(),
            psnr: psnr_masked(&img, &set.images[v], Some(mask))?,
            ssim: ssim_masked(&img, &set.images[v], Some(mask), SSIM_WINDOW)?,
        });
        renders.push(img);
    }
    Ok((EvalReport::from_rows(rows)?, renders))
}

/// Per-pixel mean of an image, for quick summaries.
pub fn mean_color(img: &RgbImage) -> [f64; 3] {
    let n = (img.width * img.height).max(1) as f64;
    let mut acc = Array1::<f64>::zeros(3);
    for p in img.pixels() {
        for c in 0..3 {
            acc[c] += p[c] as f64;
        }
    }
    [acc[0] / n, acc[1] / n, acc[2] / n]
}
