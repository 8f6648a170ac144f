//! One optimization step end to end: rays, field, compositing, losses, and the
//! reverse pass back into field and camera parameters.

use nalgebra::Vector3;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{camera_backward, generate_rays, CameraState, PixelRef, RayBatch};
use crate::dataset::PosedImageSet;
use crate::error::{Error, Result};
use crate::field::encoding::EncodingConfig;
use crate::field::mlp::{FieldCache, FieldParams, FieldState};
use crate::field::render::{intervals, sample_depths, volume_render, volume_render_backward, RenderConfig, RenderOutput};
use crate::losses::{frequency_max, total_loss, LossBreakdown, LossTerms, S3imConfig, ScheduleState};
use crate::real::Real;

/// Rays per parallel work unit.
pub const CHUNK_RAYS: usize = 128;

/// Everything a training step reads besides the parameters.
#[derive(Clone, Copy, Debug)]
pub struct StepSettings<'a> {
    pub iteration: usize,
    pub schedule: &'a ScheduleState,
    pub render: &'a RenderConfig,
    pub s3im: &'a S3imConfig,
    pub terms: LossTerms,
    /// Ramp the encoding bands with the schedule; otherwise all bands are open.
    pub anneal_frequency: bool,
    /// Whether camera gradients are computed at all.
    pub camera_trainable: bool,
    pub loss_seed: u64,
    /// Seed for stratified depth jitter; midpoints when `None` or when the
    /// render config is not stratified.
    pub jitter_seed: Option<u64>,
}

impl StepSettings<'_> {
    /// Open band limits `(f_pos, f_dir)` at this iteration.
    pub fn frequencies(&self, enc: &EncodingConfig) -> (f64, f64) {
        if self.anneal_frequency {
            (
                frequency_max(self.iteration, self.schedule, enc.pos_freqs),
                frequency_max(self.iteration, self.schedule, enc.dir_freqs),
            )
        } else {
            (enc.pos_freqs as f64, enc.dir_freqs as f64)
        }
    }
}

pub struct StepOutput<S> {
    pub breakdown: LossBreakdown,
    pub field_grads: FieldParams<S>,
    /// Exactly zero when the camera is not trainable.
    pub camera_grads: Vec<S>,
    pub rgb: Array2<S>,
    pub gt_rgb: Array2<S>,
}

/// Camera-space sample depths for each ray.
pub fn ray_depths(rays: usize, render: &RenderConfig, jitter_seed: Option<u64>) -> Array2<f64> {
    let n = render.samples_per_ray;
    let mut out = Array2::zeros((rays, n));
    let mut rng = match (render.stratified, jitter_seed) {
        (true, Some(seed)) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    for r in 0..rays {
        let z = sample_depths(n, render.near, render.far, rng.as_mut());
        out.row_mut(r).assign(&Array1::from(z));
    }
    out
}

struct ChunkForward<S> {
    range: (usize, usize),
    cache: FieldCache<S>,
    sample_rgb: Array3<S>,
    world_depths: Array2<S>,
    far: Array1<S>,
    out: RenderOutput<S>,
}

#[allow(clippy::too_many_arguments)]
fn chunk_forward<S: Real>(
    field: &FieldState<S>,
    origins: ArrayView2<S>,
    dirs: ArrayView2<S>,
    scale: ArrayView1<S>,
    depths: ArrayView2<f64>,
    far: f64,
    f: (f64, f64),
    white_background: bool,
    range: (usize, usize),
) -> Result<ChunkForward<S>> {
    let (rays, n) = depths.dim();
    let mut points = Array2::zeros((rays * n, 3));
    let mut sdirs = Array2::zeros((rays * n, 3));
    let mut world_depths = Array2::zeros((rays, n));
    for r in 0..rays {
        for k in 0..n {
            let t = S::of(depths[[r, k]]) * scale[r];
            world_depths[[r, k]] = t;
            for c in 0..3 {
                points[[r * n + k, c]] = origins[[r, c]] + dirs[[r, c]] * t;
                sdirs[[r * n + k, c]] = dirs[[r, c]];
            }
        }
    }
    let cache = field.forward_cached(points.view(), sdirs.view(), f.0, f.1);
    let sigma = cache.sigma.clone().into_shape_with_order((rays, n)).expect("sample grid");
    let sample_rgb = cache.rgb.clone().into_shape_with_order((rays, n, 3)).expect("sample grid");
    let far = scale.mapv(|s| S::of(far) * s);
    let out = volume_render(sigma.view(), sample_rgb.view(), world_depths.view(), far.view(), white_background)?;
    Ok(ChunkForward {
        range,
        cache,
        sample_rgb,
        world_depths,
        far,
        out,
    })
}

fn chunk_ranges(rays: usize) -> Vec<(usize, usize)> {
    (0..rays).step_by(CHUNK_RAYS).map(|a| (a, (a + CHUNK_RAYS).min(rays))).collect()
}

/// Forward pass, losses and gradients for one batch of pixels.
pub fn forward_backward<S: Real>(
    field: &FieldState<S>,
    camera: &CameraState<S>,
    set: &PosedImageSet,
    pixels: &[PixelRef],
    cfg: &StepSettings<'_>,
) -> Result<StepOutput<S>> {
    let rays = generate_rays(camera, pixels, set)?;
    step_on_rays(field, camera, &rays, cfg)
}

fn step_on_rays<S: Real>(
    field: &FieldState<S>,
    camera: &CameraState<S>,
    rays: &RayBatch<S>,
    cfg: &StepSettings<'_>,
) -> Result<StepOutput<S>> {
    let b = rays.len();
    if b == 0 {
        return Err(Error::invalid("empty ray batch"));
    }
    let n = cfg.render.samples_per_ray;
    let depths = ray_depths(b, cfg.render, cfg.jitter_seed);
    let freqs = cfg.frequencies(&field.config.encoding);
    let white = cfg.render.white_background;

    let chunks: Vec<ChunkForward<S>> = chunk_ranges(b)
        .into_par_iter()
        .map(|(a, e)| {
            chunk_forward(
                field,
                rays.origins.slice(s![a..e, ..]),
                rays.directions.slice(s![a..e, ..]),
                rays.depth_scale.slice(s![a..e]),
                depths.slice(s![a..e, ..]),
                cfg.render.far,
                freqs,
                white,
                (a, e),
            )
        })
        .collect::<Result<_>>()?;

    let mut rgb = Array2::zeros((b, 3));
    let mut sigma = Array2::zeros((b, n));
    for c in &chunks {
        let (a, e) = c.range;
        rgb.slice_mut(s![a..e, ..]).assign(&c.out.rgb);
        sigma.slice_mut(s![a..e, ..]).assign(&c.out.sigma);
    }
    let eval = total_loss(
        rgb.view(),
        sigma.view(),
        rays.gt_rgb.view(),
        cfg.iteration,
        cfg.schedule,
        cfg.s3im,
        cfg.terms,
        cfg.loss_seed,
        true,
    )?;
    let d_rgb = eval.d_rgb.expect("gradient requested");
    let d_sigma = eval.d_sigma;
    let want_inputs = cfg.camera_trainable;

    struct ChunkGrads<S> {
        field: FieldParams<S>,
        origin: Array2<f64>,
        dun: Array2<f64>,
        range: (usize, usize),
    }
    let grads: Vec<ChunkGrads<S>> = chunks
        .par_iter()
        .map(|c| {
            let (a, e) = c.range;
            let r = e - a;
            let deltas = intervals(c.world_depths.view(), c.far.view()).expect("checked in forward");
            let ds = d_sigma.as_ref().map(|d| d.slice(s![a..e, ..]));
            let rg = volume_render_backward(&c.out, c.sample_rgb.view(), deltas.view(), d_rgb.slice(s![a..e, ..]), ds, white);
            let d_sig_flat = rg.sigma.clone().into_shape_with_order(r * n).expect("flat");
            let d_rgb_flat = rg.rgb.clone().into_shape_with_order((r * n, 3)).expect("flat");
            let mut fg = field.params.zeros_like();
            let inputs = field.backward(&c.cache, &d_sig_flat, &d_rgb_flat, &mut fg, want_inputs);
            let mut origin = Array2::zeros((r, 3));
            let mut dun = Array2::zeros((r, 3));
            if let Some((d_pos, d_dir)) = inputs {
                for i in 0..r {
                    let ray = a + i;
                    let s_len = rays.depth_scale[ray].as_f64();
                    let dhat = Vector3::new(
                        rays.directions[[ray, 0]].as_f64(),
                        rays.directions[[ray, 1]].as_f64(),
                        rays.directions[[ray, 2]].as_f64(),
                    );
                    let mut g_o = Vector3::zeros();
                    let mut g_un = Vector3::zeros();
                    let mut g_dir = Vector3::zeros();
                    let mut g_s = 0.0;
                    for k in 0..n {
                        let row = i * n + k;
                        let dp = Vector3::new(d_pos[[row, 0]].as_f64(), d_pos[[row, 1]].as_f64(), d_pos[[row, 2]].as_f64());
                        g_o += dp;
                        // p_k = o + z_k · d_unnorm
                        g_un += dp * depths[[ray, k]];
                        g_dir += Vector3::new(d_dir[[row, 0]].as_f64(), d_dir[[row, 1]].as_f64(), d_dir[[row, 2]].as_f64());
                        let dz = if k + 1 < n {
                            depths[[ray, k + 1]] - depths[[ray, k]]
                        } else {
                            cfg.render.far - depths[[ray, k]]
                        };
                        g_s += rg.delta[[i, k]].as_f64() * dz;
                    }
                    // Unit direction d̂ = d/|d| and interval scale |d|.
                    g_un += dhat * g_s;
                    g_un += (g_dir - dhat * dhat.dot(&g_dir)) / s_len;
                    for c3 in 0..3 {
                        origin[[i, c3]] = g_o[c3];
                        dun[[i, c3]] = g_un[c3];
                    }
                }
            }
            ChunkGrads {
                field: fg,
                origin,
                dun,
                range: c.range,
            }
        })
        .collect();

    let mut field_grads = field.params.zeros_like();
    let mut g_origin = Array2::zeros((b, 3));
    let mut g_dun = Array2::zeros((b, 3));
    for g in &grads {
        field_grads.add_assign(&g.field);
        let (a, e) = g.range;
        g_origin.slice_mut(s![a..e, ..]).assign(&g.origin);
        g_dun.slice_mut(s![a..e, ..]).assign(&g.dun);
    }
    let camera_grads = if want_inputs {
        camera_backward(camera, &rays.pixels, &g_origin, &g_dun)
    } else {
        vec![S::zero(); camera.learnables().len()]
    };
    if !eval.breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            iteration: cfg.iteration,
            breakdown: eval.breakdown.to_string(),
        });
    }
    Ok(StepOutput {
        breakdown: eval.breakdown,
        field_grads,
        camera_grads,
        rgb,
        gt_rgb: rays.gt_rgb.clone(),
    })
}

/// Loss value only, for finite differencing.
pub fn loss_only<S: Real>(
    field: &FieldState<S>,
    camera: &CameraState<S>,
    set: &PosedImageSet,
    pixels: &[PixelRef],
    cfg: &StepSettings<'_>,
) -> Result<LossBreakdown> {
    let rays = generate_rays(camera, pixels, set)?;
    let out = render_rays(field, &rays.origins, &rays.directions, &rays.depth_scale, cfg.render, cfg.frequencies(&field.config.encoding), cfg.jitter_seed)?;
    Ok(total_loss(
        out.rgb.view(),
        out.sigma.view(),
        rays.gt_rgb.view(),
        cfg.iteration,
        cfg.schedule,
        cfg.s3im,
        cfg.terms,
        cfg.loss_seed,
        false,
    )?
    .breakdown)
}

/// Composited colors and per-sample densities for arbitrary rays.
pub struct RayRender<S> {
    pub rgb: Array2<S>,
    pub sigma: Array2<S>,
    pub weights: Array2<S>,
}

/// Forward-only chunked rendering of rays given unit directions and the
/// camera-depth to distance scale of each ray.
pub fn render_rays<S: Real>(
    field: &FieldState<S>,
    origins: &Array2<S>,
    dirs: &Array2<S>,
    depth_scale: &Array1<S>,
    render: &RenderConfig,
    freqs: (f64, f64),
    jitter_seed: Option<u64>,
) -> Result<RayRender<S>> {
    let b = origins.nrows();
    let n = render.samples_per_ray;
    let depths = ray_depths(b, render, jitter_seed);
    let parts: Vec<(usize, usize, RenderOutput<S>)> = chunk_ranges(b)
        .into_par_iter()
        .map(|(a, e)| {
            let c = chunk_forward(
                field,
                origins.slice(s![a..e, ..]),
                dirs.slice(s![a..e, ..]),
                depth_scale.slice(s![a..e]),
                depths.slice(s![a..e, ..]),
                render.far,
                freqs,
                render.white_background,
                (a, e),
            )?;
            Ok((a, e, c.out))
        })
        .collect::<Result<_>>()?;
    let mut out = RayRender {
        rgb: Array2::zeros((b, 3)),
        sigma: Array2::zeros((b, n)),
        weights: Array2::zeros((b, n)),
    };
    for (a, e, o) in parts {
        out.rgb.slice_mut(s![a..e, ..]).assign(&o.rgb);
        out.sigma.slice_mut(s![a..e, ..]).assign(&o.sigma);
        out.weights.slice_mut(s![a..e, ..]).assign(&o.weights);
    }
    Ok(out)
}

/// Origins, unit directions and depth scales for every pixel of a pose, in scanline order.
pub fn rays_for_pose<S: Real>(
    pose: &crate::camera::Pose,
    intrinsics: &crate::camera::Intrinsics,
    width: usize,
    height: usize,
) -> (Array2<S>, Array2<S>, Array1<S>) {
    let count = width * height;
    let mut origins = Array2::zeros((count, 3));
    let mut dirs = Array2::zeros((count, 3));
    let mut scale = Array1::zeros(count);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let d_cam = Vector3::new(
                (x as f64 + 0.5 - intrinsics.cx) / intrinsics.fx,
                (y as f64 + 0.5 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let d = pose.rotation * d_cam;
            let norm = d.norm();
            for c in 0..3 {
                origins[[i, c]] = S::of(pose.translation[c]);
                dirs[[i, c]] = S::of(d[c] / norm);
            }
            scale[i] = S::of(norm);
        }
    }
    (origins, dirs, scale)
}
