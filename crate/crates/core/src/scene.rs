//! Analytic scenes built from constant-density primitives, used as exact
//! ground truth for rendering, masks and cross-view visibility.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{exp_so3, project, Intrinsics, Pose};
use crate::dataset::{default_holdout, Mask, Observation, PosedImageSet, RgbImage, SparsePointCloud};
use crate::error::{Error, Result};
use crate::field::render::{sample_depths, volume_render};

/// Tolerance, in world units, for deciding that a view sees a surface point.
pub const VISIBILITY_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box.
    Box { half_extents: [f64; 3] },
    /// Infinite slab `|n · (p − center)| ≤ half_thickness`.
    Slab { normal: [f64; 3], half_thickness: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub density: f64,
    pub albedo: [f64; 3],
    pub is_occluder: bool,
    /// Displacement of the center per view index; zero for static geometry.
    #[serde(default)]
    pub motion: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<Checker>,
}

/// 3D checkerboard in primitive-local coordinates: odd cells are darkened by
/// the factor `1 - contrast`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checker {
    pub period: f64,
    pub contrast: f64,
}

impl Checker {
    pub fn shade(&self, albedo: [f64; 3], local: &Vector3<f64>) -> [f64; 3] {
        let cell: i64 = (0..3).map(|i| (local[i] / self.period).floor() as i64).sum();
        if cell.rem_euclid(2) == 1 {
            albedo.map(|a| a * (1.0 - self.contrast))
        } else {
            albedo
        }
    }
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        if !(self.density >= 0.0) || !self.density.is_finite() {
            return Err(Error::invalid(format!("primitive density {} must be >= 0", self.density)));
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid(format!("primitive albedo {:?} must lie in [0, 1]", self.albedo)));
        }
        let ok = match &self.shape {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Slab { normal, half_thickness } => {
                *half_thickness > 0.0 && Vector3::from(*normal).norm() > 1e-12
            }
        };
        if let Some(t) = &self.texture {
            if !(t.period > 0.0) || !(0.0..=1.0).contains(&t.contrast) {
                return Err(Error::invalid(format!("checker texture {t:?} needs period > 0 and contrast in [0, 1]")));
            }
        }
        if !ok {
            return Err(Error::invalid(format!("primitive {:?} has a non-positive extent", self.shape)));
        }
        Ok(())
    }

    fn center_at(&self, view: usize) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.motion) * view as f64
    }

    fn contains_at(&self, p: &Vector3<f64>, center: &Vector3<f64>) -> bool {
        let q = p - center;
        match &self.shape {
            Shape::Sphere { radius } => q.norm_squared() <= radius * radius,
            Shape::Box { half_extents } => (0..3).all(|i| q[i].abs() <= half_extents[i]),
            Shape::Slab { normal, half_thickness } => {
                let n = Vector3::from(*normal).normalize();
                n.dot(&q).abs() <= *half_thickness
            }
        }
    }

    /// Parameter interval `[t0, t1]` where `origin + t·dir` lies inside.
    fn ray_interval(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, center: &Vector3<f64>) -> Option<(f64, f64)> {
        let oc = origin - center;
        match &self.shape {
            Shape::Sphere { radius } => {
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                Some(((-b - sq) / a, (-b + sq) / a))
            }
            Shape::Box { half_extents } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if dir[i].abs() < 1e-300 {
                        if oc[i].abs() > half_extents[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half_extents[i] - oc[i]) / dir[i];
                    let b = (half_extents[i] - oc[i]) / dir[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1).then_some((t0, t1))
            }
            Shape::Slab { normal, half_thickness } => {
                let n = Vector3::from(*normal).normalize();
                let dn = n.dot(dir);
                let on = n.dot(&oc);
                if dn.abs() < 1e-300 {
                    return (on.abs() <= *half_thickness).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let a = (-half_thickness - on) / dn;
                let b = (half_thickness - on) / dn;
                Some((a.min(b), a.max(b)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background_color: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(format!("need 0 < near < far, got {} and {}", self.near, self.far)));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        if !self.primitives.is_empty() && self.primitives.iter().all(|p| p.is_occluder) {
            return Err(Error::invalid("scene needs at least one non-occluder primitive"));
        }
        Ok(())
    }

    pub fn has_occluders(&self) -> bool {
        self.primitives.iter().any(|p| p.is_occluder)
    }
}

/// Density and color at a world point as seen from view 0.
pub fn scene_density_color(scene: &SyntheticScene, point: &Vector3<f64>, include_occluders: bool) -> (f64, [f64; 3]) {
    density_color_at_view(scene, point, include_occluders, 0)
}

/// Density and color with moving primitives placed for `view`. The first
/// listed primitive containing the point wins.
pub fn density_color_at_view(
    scene: &SyntheticScene,
    point: &Vector3<f64>,
    include_occluders: bool,
    view: usize,
) -> (f64, [f64; 3]) {
    for p in &scene.primitives {
        if p.is_occluder && !include_occluders {
            continue;
        }
        let center = p.center_at(view);
        if p.contains_at(point, &center) {
            let color = match &p.texture {
                Some(t) => t.shade(p.albedo, &(point - center)),
                None => p.albedo,
            };
            return (p.density, color);
        }
    }
    (0.0, scene.background_color)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub intrinsics: Intrinsics,
    /// `(W, H)` in pixels.
    pub resolution: (usize, usize),
    pub poses: Vec<Pose>,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::invalid("rig resolution must be positive"));
        }
        for (i, p) in self.poses.iter().enumerate() {
            if !p.is_rigid(1e-6) {
                return Err(Error::invalid(format!("rig pose {i} is not a rigid transform")));
            }
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.poses.len()
    }

    fn check_view(&self, view: usize) -> Result<()> {
        if view >= self.poses.len() {
            return Err(Error::invalid(format!(
                "view index {view} out of range 0..{}",
                self.poses.len()
            )));
        }
        Ok(())
    }

    /// Origin and unnormalized direction (`z = 1` in camera space) through a pixel center.
    pub fn pixel_ray(&self, view: usize, x: usize, y: usize) -> (Vector3<f64>, Vector3<f64>) {
        let k = &self.intrinsics;
        let pose = &self.poses[view];
        let d_cam = Vector3::new(
            (x as f64 + 0.5 - k.cx) / k.fx,
            (y as f64 + 0.5 - k.cy) / k.fy,
            1.0,
        );
        (pose.translation, pose.rotation * d_cam)
    }

    /// Mean distance from the camera centers to `target`.
    pub fn scene_scale(&self, target: &Vector3<f64>) -> f64 {
        let n = self.poses.len().max(1) as f64;
        self.poses.iter().map(|p| (p.center() - target).norm()).sum::<f64>() / n
    }
}

/// Sample placement along oracle rays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrature {
    Midpoint,
    /// One uniform jitter per depth bin, seeded per pixel.
    Stratified(u64),
}

/// Color of a single ray `origin + z·dir_unnorm`, `z ∈ [near, far]` in camera depth.
#[allow(clippy::too_many_arguments)]
pub fn oracle_ray(
    scene: &SyntheticScene,
    view: usize,
    origin: &Vector3<f64>,
    dir_unnorm: &Vector3<f64>,
    samples: usize,
    include_occluders: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> [f64; 3] {
    let scale = dir_unnorm.norm();
    let zs = sample_depths(samples, scene.near, scene.far, rng);
    let mut sigma = Array2::zeros((1, samples));
    let mut rgb = Array3::zeros((1, samples, 3));
    let mut depths = Array2::zeros((1, samples));
    for (k, &z) in zs.iter().enumerate() {
        let p = origin + dir_unnorm * z;
        let (s, c) = density_color_at_view(scene, &p, include_occluders, view);
        sigma[[0, k]] = s;
        for ch in 0..3 {
            rgb[[0, k, ch]] = c[ch];
        }
        depths[[0, k]] = z * scale;
    }
    let far = Array1::from_elem(1, scene.far * scale);
    let out = volume_render(sigma.view(), rgb.view(), depths.view(), far.view(), false)
        .expect("oracle depths are increasing");
    // Rays that escape pick up the background color.
    let t_exit = 1.0 - out.opacity[0];
    let bg = scene.background_color;
    [
        out.rgb[[0, 0]] + t_exit * bg[0],
        out.rgb[[0, 1]] + t_exit * bg[1],
        out.rgb[[0, 2]] + t_exit * bg[2],
    ]
}

fn pixel_rng(seed: u64, view: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((view as u64) << 40) | index as u64);
    rng
}

/// Full-precision oracle render as an `H × W × 3` array.
pub fn render_oracle_f64(
    scene: &SyntheticScene,
    rig: &CameraRig,
    view: usize,
    samples_per_ray: usize,
    include_occluders: bool,
    quadrature: Quadrature,
) -> Result<Array3<f64>> {
    rig.check_view(view)?;
    if samples_per_ray < 2 {
        return Err(Error::invalid("samples_per_ray must be >= 2"));
    }
    let (w, h) = rig.resolution;
    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (o, d) = rig.pixel_ray(view, x, y);
                    let mut rng = match quadrature {
                        Quadrature::Midpoint => None,
                        Quadrature::Stratified(seed) => Some(pixel_rng(seed, view, y * w + x)),
                    };
                    oracle_ray(scene, view, &o, &d, samples_per_ray, include_occluders, rng.as_mut())
                })
                .collect()
        })
        .collect();
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| rows[y][x][c]))
}

/// Oracle render of one view.
pub fn render_oracle(
    scene: &SyntheticScene,
    rig: &CameraRig,
    view: usize,
    samples_per_ray: usize,
    include_occluders: bool,
    quadrature: Quadrature,
) -> Result<RgbImage> {
    let arr = render_oracle_f64(scene, rig, view, samples_per_ray, include_occluders, quadrature)?;
    let (h, w, _) = arr.dim();
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.set(x, y, [arr[[y, x, 0]] as f32, arr[[y, x, 1]] as f32, arr[[y, x, 2]] as f32]);
        }
    }
    Ok(img)
}

/// First primitive entered by the ray within `[t_min, t_max]`: its index and
/// entry parameter. Ties go to the first listed primitive.
fn first_hit(
    scene: &SyntheticScene,
    view: usize,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_min: f64,
    t_max: f64,
    include_occluders: bool,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        if p.is_occluder && !include_occluders || p.density == 0.0 {
            continue;
        }
        let Some((t0, t1)) = p.ray_interval(origin, dir, &p.center_at(view)) else {
            continue;
        };
        let entry = t0.max(t_min);
        if entry > t1.min(t_max) {
            continue;
        }
        if best.map_or(true, |(_, b)| entry < b) {
            best = Some((i, entry));
        }
    }
    best
}

/// 1 where the first surface hit along the pixel ray belongs to an occluder.
pub fn occluder_mask(scene: &SyntheticScene, rig: &CameraRig, view: usize) -> Result<Mask> {
    rig.check_view(view)?;
    let (w, h) = rig.resolution;
    let mut mask = Mask::new(w, h);
    if !scene.has_occluders() {
        return Ok(mask);
    }
    for y in 0..h {
        for x in 0..w {
            let (o, d) = rig.pixel_ray(view, x, y);
            if let Some((i, _)) = first_hit(scene, view, &o, &d, scene.near, scene.far, true) {
                mask.set(x, y, scene.primitives[i].is_occluder);
            }
        }
    }
    Ok(mask)
}

/// Whether `view` sees the world point `p` as its first surface hit.
fn sees_point(scene: &SyntheticScene, rig: &CameraRig, view: usize, p: &Vector3<f64>) -> bool {
    let pose = &rig.poses[view];
    let (w, h) = rig.resolution;
    let Some((xy, depth)) = project(pose, &rig.intrinsics, p) else {
        return false;
    };
    let inside = xy[0] >= 0.0 && xy[1] >= 0.0 && xy[0] < w as f64 && xy[1] < h as f64;
    if !inside || depth < scene.near || depth > scene.far {
        return false;
    }
    let c = pose.translation;
    let dist = (p - c).norm();
    let dir = (p - c) / dist;
    // Depth bounds are camera-z; convert to distance along this ray.
    let zscale = dist / depth;
    match first_hit(scene, view, &c, &dir, scene.near * zscale, scene.far * zscale, true) {
        Some((_, t)) => (t - dist).abs() <= VISIBILITY_TOLERANCE,
        None => false,
    }
}

/// Per reference pixel, the number of views that see its first non-occluder
/// surface point. Background pixels get the total view count. A reference pixel
/// covered by an occluder can report 0 when no view sees the point behind it.
pub fn pixel_visibility(scene: &SyntheticScene, rig: &CameraRig, reference_view: usize) -> Result<Array2<u32>> {
    rig.check_view(reference_view)?;
    let views = rig.num_views();
    if views < 2 {
        return Err(Error::invalid("pixel_visibility needs at least 2 views"));
    }
    let (w, h) = rig.resolution;
    let rows: Vec<Vec<u32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (o, d) = rig.pixel_ray(reference_view, x, y);
                    match first_hit(scene, reference_view, &o, &d, scene.near, scene.far, false) {
                        None => views as u32,
                        Some((_, t)) => {
                            let p = o + d * t;
                            (0..views).filter(|&v| sees_point(scene, rig, v, &p)).count() as u32
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| rows[y][x]))
}

/// Composes each pose with a rotation of exactly `rotation_noise_deg` about a
/// uniform random axis and moves its center by `translation_noise` in a
/// uniform random direction.
pub fn perturb_poses(rig: &CameraRig, rotation_noise_deg: f64, translation_noise: f64, seed: u64) -> Result<CameraRig> {
    if !(rotation_noise_deg >= 0.0 && translation_noise >= 0.0) {
        return Err(Error::invalid("noise magnitudes must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rig.clone();
    let angle = rotation_noise_deg.to_radians();
    for pose in &mut out.poses {
        let axis = random_unit(&mut rng);
        let shift = random_unit(&mut rng);
        if angle > 0.0 {
            pose.rotation = exp_so3(&(axis * angle)) * pose.rotation;
        }
        if translation_noise > 0.0 {
            pose.translation += shift * translation_noise;
        }
    }
    Ok(out)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

fn default_oracle_samples() -> usize {
    128
}

/// Scene description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub primitives: Vec<Primitive>,
    pub background_color: [f64; 3],
    pub near: f64,
    pub far: f64,
    /// World-from-camera `3 × 4` matrices, row-major.
    pub cameras: Vec<[[f64; 4]; 3]>,
    pub intrinsics: Intrinsics,
    /// `[W, H]`.
    pub resolution: [usize; 2],
    pub seed: u64,
    /// Defaults to every 8th view.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_indices: Option<Vec<usize>>,
    #[serde(default = "default_oracle_samples")]
    pub samples_per_ray: usize,
}

impl SceneFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        file.scene().validate()?;
        file.rig().validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn scene(&self) -> SyntheticScene {
        SyntheticScene {
            primitives: self.primitives.clone(),
            background_color: self.background_color,
            near: self.near,
            far: self.far,
        }
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig {
            intrinsics: self.intrinsics,
            resolution: (self.resolution[0], self.resolution[1]),
            poses: self.cameras.iter().map(Pose::from_rows).collect(),
        }
    }

    pub fn holdout(&self) -> Vec<usize> {
        self.holdout_indices
            .clone()
            .unwrap_or_else(|| default_holdout(self.cameras.len()))
    }

    pub fn set_rig(&mut self, rig: &CameraRig) {
        self.intrinsics = rig.intrinsics;
        self.resolution = [rig.resolution.0, rig.resolution.1];
        self.cameras = rig.poses.iter().map(Pose::to_rows).collect();
    }

    /// Head-on view of a single white slab between camera depths
    /// `2` and `2 + thickness`, black background, `near = 1`, `far = 5`.
    pub fn constant_slab(density: f64, thickness: f64) -> Self {
        SceneFile {
            primitives: vec![Primitive {
                shape: Shape::Slab {
                    normal: [0.0, 0.0, 1.0],
                    half_thickness: thickness / 2.0,
                },
                center: [0.0, 0.0, 2.0 + thickness / 2.0],
                density,
                albedo: [1.0; 3],
                is_occluder: false,
                motion: [0.0; 3],
                texture: None,
            }],
            background_color: [0.0; 3],
            near: 1.0,
            far: 5.0,
            cameras: vec![Pose::identity().to_rows(), Pose::look_at(
                Vector3::new(0.3, 0.0, 0.0),
                Vector3::new(0.3, 0.0, 1.0),
                Vector3::new(0.0, -1.0, 0.0),
            )
            .to_rows()],
            intrinsics: Intrinsics::centered(8.0, 8, 8),
            resolution: [8, 8],
            seed: 0,
            holdout_indices: Some(vec![1]),
            samples_per_ray: 128,
        }
    }

    /// Forward-facing desk scene: a back wall and a floor, three colored boxes
    /// at mid depth, and a near-camera sphere that moves between views. The
    /// cameras slide along a horizontal track facing the wall.
    pub fn cluttered_desk(views: usize, resolution: usize, holdout: Vec<usize>) -> Self {
        let prim = |shape, center, albedo: [f64; 3], is_occluder, motion| Primitive {
            shape,
            center,
            density: 30.0,
            albedo,
            is_occluder,
            motion,
            texture: Some(Checker { period: 0.7, contrast: 0.5 }),
        };
        let step = if views > 1 { 1.0 / (views - 1) as f64 } else { 0.0 };
        let track = 2.0;
        // Sphere slides slower than the cameras so it sweeps across the frame.
        let sphere_dx = track * step - 0.15 * 8.0 * step;
        let primitives = vec![
            prim(Shape::Sphere { radius: 0.55 }, [-1.4, 0.1, -1.5], [0.9, 0.1, 0.8], true, [sphere_dx, 0.0, 0.0]),
            prim(Shape::Box { half_extents: [0.35, 0.35, 0.3] }, [-0.9, 0.4, 0.6], [0.9, 0.2, 0.15], false, [0.0; 3]),
            prim(Shape::Box { half_extents: [0.4, 0.3, 0.3] }, [0.6, -0.5, 0.8], [0.2, 0.8, 0.3], false, [0.0; 3]),
            prim(Shape::Box { half_extents: [0.25, 0.25, 0.25] }, [0.4, 0.7, 0.3], [0.95, 0.85, 0.2], false, [0.0; 3]),
            prim(
                Shape::Slab { normal: [0.0, 1.0, 0.0], half_thickness: 0.2 },
                [0.0, -1.6, 0.0],
                [0.45, 0.35, 0.25],
                false,
                [0.0; 3],
            ),
            prim(
                Shape::Slab { normal: [0.0, 0.0, 1.0], half_thickness: 0.25 },
                [0.0, 0.0, 2.0],
                [0.55, 0.6, 0.7],
                false,
                [0.0; 3],
            ),
        ];
        let cameras = (0..views)
            .map(|v| {
                let s = v as f64 * step;
                let eye = Vector3::new(-track / 2.0 + track * s, 0.3 * (1.3 * v as f64).sin(), -4.0);
                Pose::look_at(eye, Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 1.0, 0.0)).to_rows()
            })
            .collect();
        SceneFile {
            primitives,
            background_color: [0.0; 3],
            near: 1.0,
            far: 7.0,
            cameras,
            intrinsics: Intrinsics::centered(resolution as f64, resolution, resolution),
            resolution: [resolution, resolution],
            seed: 0,
            holdout_indices: Some(holdout),
            samples_per_ray: 128,
        }
    }
}

/// Renders every view with occluders and derives the occluder masks.
pub fn synthesize_dataset(file: &SceneFile) -> Result<PosedImageSet> {
    let scene = file.scene();
    let rig = file.rig();
    scene.validate()?;
    rig.validate()?;
    let mut images = Vec::with_capacity(rig.num_views());
    let mut masks = Vec::with_capacity(rig.num_views());
    for v in 0..rig.num_views() {
        images.push(render_oracle(
            &scene,
            &rig,
            v,
            file.samples_per_ray,
            true,
            Quadrature::Stratified(file.seed),
        )?);
        masks.push(occluder_mask(&scene, &rig, v)?);
    }
    let set = PosedImageSet {
        images,
        masks,
        intrinsics: rig.intrinsics,
        poses: rig.poses.clone(),
        near: scene.near,
        far: scene.far,
        holdout_indices: file.holdout(),
    };
    set.validate()?;
    Ok(set)
}

/// Sparse reconstruction stand-in: first surface hits on a pixel grid of every
/// view, with their observations in all views that see them.
pub fn sparse_cloud(scene: &SyntheticScene, rig: &CameraRig, stride: usize) -> Result<SparsePointCloud> {
    if scene.primitives.iter().any(|p| p.motion != [0.0; 3]) {
        return Err(Error::invalid("sparse_cloud needs a static scene"));
    }
    let (w, h) = rig.resolution;
    let mut cloud = SparsePointCloud::default();
    for v in 0..rig.num_views() {
        for y in (0..h).step_by(stride.max(1)) {
            for x in (0..w).step_by(stride.max(1)) {
                let (o, d) = rig.pixel_ray(v, x, y);
                let Some((_, t)) = first_hit(scene, v, &o, &d, scene.near, scene.far, true) else {
                    continue;
                };
                let p = o + d * t;
                let obs: Vec<Observation> = (0..rig.num_views())
                    .filter(|&u| sees_point(scene, rig, u, &p))
                    .filter_map(|u| {
                        project(&rig.poses[u], &rig.intrinsics, &p).map(|(xy, _)| Observation { view: u, xy })
                    })
                    .collect();
                if !obs.is_empty() {
                    cloud.points.push([p.x, p.y, p.z]);
                    cloud.observations.push(obs);
                }
            }
        }
    }
    Ok(cloud)
}

/// Geodesic rotation error in radians and camera-center distance between two poses.
pub fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    let r: Matrix3<f64> = a.rotation;
    (
        crate::camera::rotation_angle_between(&r, &b.rotation),
        (a.center() - b.center()).norm(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_view_rig(res: usize) -> CameraRig {
        CameraRig {
            intrinsics: Intrinsics::centered(res as f64, res, res),
            resolution: (res, res),
            poses: vec![Pose::identity()],
        }
    }

    fn cube(center: [f64; 3], half: f64, density: f64, albedo: [f64; 3], occ: bool) -> Primitive {
        Primitive {
            shape: Shape::Box { half_extents: [half; 3] },
            center,
            density,
            albedo,
            is_occluder: occ,
            motion: [0.0; 3],
            texture: None,
        }
    }

    fn scene(primitives: Vec<Primitive>) -> SyntheticScene {
        SyntheticScene {
            primitives,
            background_color: [0.2, 0.3, 0.4],
            near: 1.0,
            far: 8.0,
        }
    }

    #[test]
    fn density_lookup_examples() {
        let s = scene(vec![
            cube([0.0, 0.0, 3.0], 0.5, 2.0, [1.0, 0.0, 0.0], false),
            cube([5.0, 0.0, 3.0], 0.5, 4.0, [0.0, 1.0, 0.0], true),
        ]);
        assert_eq!(scene_density_color(&s, &Vector3::new(0.1, 0.0, 3.0), true), (2.0, [1.0, 0.0, 0.0]));
        assert_eq!(scene_density_color(&s, &Vector3::new(5.0, 0.0, 3.0), false), (0.0, s.background_color));
        assert_eq!(scene_density_color(&s, &Vector3::new(9.0, 9.0, 9.0), true), (0.0, s.background_color));
    }

    #[test]
    fn first_listed_wins() {
        let s = scene(vec![
            cube([0.0, 0.0, 3.0], 0.5, 2.0, [1.0, 0.0, 0.0], false),
            cube([0.0, 0.0, 3.0], 1.0, 7.0, [0.0, 0.0, 1.0], false),
        ]);
        assert_eq!(scene_density_color(&s, &Vector3::new(0.0, 0.0, 3.0), true).0, 2.0);
        assert_eq!(scene_density_color(&s, &Vector3::new(0.8, 0.0, 3.0), true).0, 7.0);
    }

    #[test]
    fn empty_scene_renders_background() {
        let s = scene(vec![]);
        let img = render_oracle(&s, &single_view_rig(4), 0, 8, true, Quadrature::Stratified(3)).unwrap();
        for p in img.pixels() {
            assert_eq!(p, [0.2f32, 0.3, 0.4]);
        }
        assert!(render_oracle(&s, &single_view_rig(4), 1, 8, true, Quadrature::Midpoint).is_err());
    }

    #[test]
    fn slab_transmittance_converges() {
        let file = SceneFile::constant_slab(2.0, 1.0);
        let (s, rig) = (file.scene(), file.rig());
        for n in [128, 256] {
            let img = render_oracle_f64(&s, &rig, 0, n, true, Quadrature::Midpoint).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    // Path length through the slab grows with the ray's obliquity.
                    let len = rig.pixel_ray(0, x, y).1.norm();
                    let expected = 1.0 - (-2.0 * len).exp();
                    assert!((img[[y, x, 0]] - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn occluder_changes_only_its_footprint() {
        let s = scene(vec![
            Primitive {
                shape: Shape::Sphere { radius: 0.4 },
                center: [0.0, 0.0, 2.0],
                density: 50.0,
                albedo: [0.0, 0.0, 1.0],
                is_occluder: true,
                motion: [0.0; 3],
                texture: None,
            },
            cube([0.0, 0.0, 5.0], 1.5, 10.0, [1.0, 0.0, 0.0], false),
        ]);
        let rig = single_view_rig(24);
        let with = render_oracle(&s, &rig, 0, 64, true, Quadrature::Stratified(1)).unwrap();
        let without = render_oracle(&s, &rig, 0, 64, false, Quadrature::Stratified(1)).unwrap();
        let mask = occluder_mask(&s, &rig, 0).unwrap();
        assert!(mask.occluded_count() > 0);
        for y in 0..24 {
            for x in 0..24 {
                let differ = with.get(x, y) != without.get(x, y);
                assert_eq!(differ, mask.is_occluded(x, y), "pixel {x},{y}");
            }
        }
    }

    #[test]
    fn sphere_mask_is_projected_disc() {
        let r = 0.5;
        let d = 4.0;
        let s = scene(vec![
            Primitive {
                shape: Shape::Sphere { radius: r },
                center: [0.0, 0.0, d],
                density: 10.0,
                albedo: [1.0; 3],
                is_occluder: true,
                motion: [0.0; 3],
                texture: None,
            },
            cube([0.0, 0.0, 7.0], 3.0, 1.0, [0.5; 3], false),
        ]);
        let res = 64;
        let rig = single_view_rig(res);
        let mask = occluder_mask(&s, &rig, 0).unwrap();
        // Silhouette of a sphere seen head-on subtends asin(r/d).
        let projected = rig.intrinsics.fx * (r / d).asin().tan();
        let c = res as f64 / 2.0;
        for y in 0..res {
            for x in 0..res {
                let dist = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt();
                if dist < projected - 1.0 {
                    assert!(mask.is_occluded(x, y));
                } else if dist > projected + 1.0 {
                    assert!(!mask.is_occluded(x, y));
                }
            }
        }
    }

    #[test]
    fn occluder_behind_slab_is_unmasked() {
        let s = scene(vec![
            cube([0.0, 0.0, 3.0], 5.0, 1.0, [0.5; 3], false),
            cube([0.0, 0.0, 6.5], 0.4, 9.0, [1.0; 3], true),
        ]);
        let s = SyntheticScene { far: 8.5, ..s };
        let mut rig = single_view_rig(8);
        rig.poses[0].translation = Vector3::new(0.0, 0.0, -4.0);
        assert_eq!(occluder_mask(&s, &rig, 0).unwrap().occluded_count(), 0);
    }

    fn wall_rig(views: usize) -> CameraRig {
        CameraRig {
            intrinsics: Intrinsics::centered(16.0, 16, 16),
            resolution: (16, 16),
            poses: (0..views)
                .map(|v| {
                    Pose::look_at(
                        Vector3::new(v as f64 * 0.3 - 0.45, 0.0, 0.0),
                        Vector3::new(0.0, 0.0, 5.0),
                        Vector3::new(0.0, 1.0, 0.0),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn visibility_without_occluders_is_full() {
        let s = scene(vec![cube([0.0, 0.0, 6.0], 0.8, 20.0, [1.0; 3], false)]);
        let rig = wall_rig(4);
        let vis = pixel_visibility(&s, &rig, 1).unwrap();
        assert_eq!(vis[[8, 8]], 4);
        assert!(vis.iter().all(|&v| v == 4));
    }

    #[test]
    fn visibility_counts_blocked_view() {
        let mut s = scene(vec![cube([0.0, 0.0, 6.0], 0.8, 20.0, [1.0; 3], false)]);
        let rig = wall_rig(4);
        // A small occluder on the line from view 3's center to the cube's front-face center.
        let c3 = rig.poses[3].center();
        let target = Vector3::new(0.0, 0.0, 5.2);
        let mid = c3 + (target - c3) * 0.4;
        s.primitives.insert(0, Primitive {
            shape: Shape::Sphere { radius: 0.15 },
            center: [mid.x, mid.y, mid.z],
            density: 50.0,
            albedo: [0.0; 3],
            is_occluder: true,
            motion: [0.0; 3],
            texture: None,
        });
        let ref_view = 1;
        let (o, d) = rig.pixel_ray(ref_view, 8, 8);
        let (_, t) = first_hit(&s, ref_view, &o, &d, s.near, s.far, false).unwrap();
        let p = o + d * t;
        let blocked: Vec<usize> = (0..4).filter(|&v| !sees_point(&s, &rig, v, &p)).collect();
        let vis = pixel_visibility(&s, &rig, ref_view).unwrap();
        assert_eq!(blocked, vec![3]);
        assert_eq!(vis[[8, 8]], 3);
    }

    #[test]
    fn point_seen_only_by_reference() {
        let s = scene(vec![cube([0.0, 0.0, 4.0], 0.3, 20.0, [1.0; 3], false)]);
        let mut rig = single_view_rig(8);
        rig.poses.push(Pose::look_at(
            Vector3::new(0.0, 0.0, 10.0),
            Vector3::new(0.0, 0.0, 20.0),
            Vector3::new(0.0, 1.0, 0.0),
        ));
        let vis = pixel_visibility(&s, &rig, 0).unwrap();
        assert_eq!(vis[[4, 4]], 1);
    }

    #[test]
    fn perturbation_examples() {
        let rig = wall_rig(5);
        assert_eq!(perturb_poses(&rig, 0.0, 0.0, 1).unwrap(), rig);
        let a = perturb_poses(&rig, 2.0, 0.1, 7).unwrap();
        assert_eq!(a, perturb_poses(&rig, 2.0, 0.1, 7).unwrap());
        for (p, q) in a.poses.iter().zip(&rig.poses) {
            let (rot, center) = pose_error(p, q);
            assert!((rot - 2f64.to_radians()).abs() < 1e-6);
            assert!((center - 0.1).abs() < 1e-9);
        }
        assert_eq!(a.intrinsics, rig.intrinsics);
        assert!(perturb_poses(&rig, -1.0, 0.0, 0).is_err());
    }

    #[test]
    fn scene_file_round_trip() {
        let file = SceneFile::cluttered_desk(9, 16, vec![4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        file.save(&path).unwrap();
        assert_eq!(SceneFile::load(&path).unwrap(), file);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"seed\"", "\"sed\"");
        std::fs::write(&path, text).unwrap();
        assert!(SceneFile::load(&path).is_err());
    }

    #[test]
    fn desk_occluder_coverage() {
        let file = SceneFile::cluttered_desk(9, 32, vec![4]);
        let (s, rig) = (file.scene(), file.rig());
        for v in 0..9 {
            let m = occluder_mask(&s, &rig, v).unwrap();
            let frac = m.occluded_count() as f64 / (32.0 * 32.0);
            assert!((0.10..=0.25).contains(&frac), "view {v}: {frac}");
        }
    }

    proptest! {
        #[test]
        fn visibility_bounded_for_surface_pixels(view in 0usize..4, x in 0usize..16, y in 0usize..16) {
            let s = scene(vec![
                cube([0.2, -0.1, 6.0], 0.7, 20.0, [1.0; 3], false),
                cube([0.0, 0.0, 9.0], 4.0, 20.0, [0.5; 3], false),
            ]);
            let s = SyntheticScene { far: 12.0, ..s };
            let rig = wall_rig(4);
            let vis = pixel_visibility(&s, &rig, view).unwrap();
            prop_assert!(vis[[y, x]] >= 1 && vis[[y, x]] <= 4);
        }
    }
}
