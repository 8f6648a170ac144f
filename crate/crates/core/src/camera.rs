//! Pinhole camera model with learnable intrinsics and per-view pose residuals.
//!
//! Conventions: poses are world-from-camera (`x_world = R x_cam + t`, so `t` is
//! the camera center); camera axes are x-right, y-down, z-forward; pixel `(u, v)`
//! has its center at image coordinate `(u + 0.5, v + 0.5)`.
//!
//! Learnable state is stored in the pipeline scalar `S`, but ray generation and
//! its adjoint are evaluated in `f64`.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::PosedImageSet;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Intrinsics {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid(format!(
                "intrinsics require fx, fy > 0 and finite principal point, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Intrinsics after downsampling the image by an integer factor.
    pub fn scaled(&self, factor: usize) -> Self {
        let s = factor as f64;
        Intrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
        }
    }
}

/// Rigid world-from-camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 4]; 3]", from = "[[f64; 4]; 3]")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl From<[[f64; 4]; 3]> for Pose {
    fn from(rows: [[f64; 4]; 3]) -> Self {
        Pose::from_rows(&rows)
    }
}

impl From<Pose> for [[f64; 4]; 3] {
    fn from(pose: Pose) -> Self {
        pose.to_rows()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn from_rows(rows: &[[f64; 4]; 3]) -> Self {
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Pose {
            rotation,
            translation,
        }
    }

    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        rows
    }

    /// Camera at `eye` looking toward `target`; `up` is the approximate world up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        // y points down in the image, so the camera's y axis is opposite to up.
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Pose {
            rotation,
            translation: eye,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        orth <= tol && (r.determinant() - 1.0).abs() <= tol
    }
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

// Below this angle the trigonometric coefficients switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-4;

/// Rodrigues exponential map from an axis-angle vector to a rotation matrix.
pub fn exp_so3(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = axis_angle.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let w = hat(axis_angle);
    Matrix3::identity() + w * a + w * w * b
}

/// Left Jacobian of SO(3): `exp(w + d) ≈ exp(J_l(w) d) exp(w)`.
pub fn left_jacobian_so3(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = axis_angle.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let w = hat(axis_angle);
    Matrix3::identity() + w * b + w * w * c
}

/// Geodesic angle (radians) between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near zero; atan2 of the skew part is stable there.
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    (skew.norm() / 2.0).atan2(cos)
}

/// Projects a world point into a view; `None` when behind the camera.
/// Returns continuous image coordinates and the camera-space depth.
pub fn project(pose: &Pose, intr: &Intrinsics, p: &Vector3<f64>) -> Option<([f64; 2], f64)> {
    let pc = pose.world_to_camera(p);
    if pc.z <= 0.0 {
        return None;
    }
    Some((
        [intr.fx * pc.x / pc.z + intr.cx, intr.fy * pc.y / pc.z + intr.cy],
        pc.z,
    ))
}

/// Inverse of [`project`] at a known camera-space depth.
pub fn unproject(pose: &Pose, intr: &Intrinsics, xy: [f64; 2], depth: f64) -> Vector3<f64> {
    let pc = Vector3::new(
        (xy[0] - intr.cx) / intr.fx * depth,
        (xy[1] - intr.cy) / intr.fy * depth,
        depth,
    );
    pose.camera_to_world(&pc)
}

/// Unnormalized world direction of the ray through a continuous image point;
/// its camera-space z component is 1, so `origin + z * dir` sits at depth `z`.
pub fn pixel_direction(pose: &Pose, intr: &Intrinsics, xy: [f64; 2]) -> Vector3<f64> {
    let d = Vector3::new((xy[0] - intr.cx) / intr.fx, (xy[1] - intr.cy) / intr.fy, 1.0);
    pose.rotation * d
}

/// A pixel of a given view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRef {
    pub view: usize,
    pub x: u32,
    pub y: u32,
}

impl PixelRef {
    pub fn new(view: usize, x: u32, y: u32) -> Self {
        PixelRef { view, x, y }
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x as f64 + 0.5, self.y as f64 + 0.5]
    }
}

/// Learnable camera parameters.
///
/// The learnable vector is laid out as `[log fx, log fy, ω_0, …, ω_{V-1}, τ_0, …, τ_{V-1}]`
/// where `ω_v` is an axis-angle rotation residual and `τ_v` a camera-center offset.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraState<S> {
    learnables: Vec<S>,
    principal: [f64; 2],
    base_poses: Vec<Pose>,
    trainable_from: usize,
    tie_focal: bool,
    focal_aspect: f64,
}

/// Gradient with the same layout as [`CameraState::learnables`].
pub type CameraGrads<S> = Vec<S>;

impl<S: Real> CameraState<S> {
    pub fn new(intrinsics: Intrinsics, base_poses: Vec<Pose>, trainable_from: usize, tie_focal: bool) -> Self {
        let views = base_poses.len();
        let mut learnables = vec![S::zero(); 2 + 6 * views];
        learnables[0] = S::of(intrinsics.fx.ln());
        learnables[1] = S::of(intrinsics.fy.ln());
        CameraState {
            learnables,
            principal: [intrinsics.cx, intrinsics.cy],
            base_poses,
            trainable_from,
            tie_focal,
            focal_aspect: intrinsics.fy / intrinsics.fx,
        }
    }

    /// Rebuilds a state from checkpointed parts.
    pub fn from_parts(
        learnables: Vec<S>,
        principal: [f64; 2],
        base_poses: Vec<Pose>,
        trainable_from: usize,
        tie_focal: bool,
        focal_aspect: f64,
    ) -> Result<Self> {
        if learnables.len() != 2 + 6 * base_poses.len() {
            return Err(Error::invalid(format!(
                "camera learnables have length {}, expected {}",
                learnables.len(),
                2 + 6 * base_poses.len()
            )));
        }
        Ok(CameraState {
            learnables,
            principal,
            base_poses,
            trainable_from,
            tie_focal,
            focal_aspect,
        })
    }

    /// Converts the learnable scalars to another precision.
    pub fn cast<T: Real>(&self) -> CameraState<T> {
        CameraState {
            learnables: self.learnables.iter().map(|v| T::of(v.as_f64())).collect(),
            principal: self.principal,
            base_poses: self.base_poses.clone(),
            trainable_from: self.trainable_from,
            tie_focal: self.tie_focal,
            focal_aspect: self.focal_aspect,
        }
    }

    pub fn num_views(&self) -> usize {
        self.base_poses.len()
    }

    pub fn learnables(&self) -> &[S] {
        &self.learnables
    }

    pub fn learnables_mut(&mut self) -> &mut [S] {
        &mut self.learnables
    }

    pub fn principal(&self) -> [f64; 2] {
        self.principal
    }

    pub fn base_poses(&self) -> &[Pose] {
        &self.base_poses
    }

    pub fn trainable_from(&self) -> usize {
        self.trainable_from
    }

    pub fn tie_focal(&self) -> bool {
        self.tie_focal
    }

    pub fn focal_aspect(&self) -> f64 {
        self.focal_aspect
    }

    pub fn fx(&self) -> f64 {
        self.learnables[0].as_f64().exp()
    }

    pub fn fy(&self) -> f64 {
        if self.tie_focal {
            self.fx() * self.focal_aspect
        } else {
            self.learnables[1].as_f64().exp()
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx(),
            fy: self.fy(),
            cx: self.principal[0],
            cy: self.principal[1],
        }
    }

    fn rotation_offset(view: usize) -> usize {
        2 + 3 * view
    }

    fn translation_offset(&self, view: usize) -> usize {
        2 + 3 * self.base_poses.len() + 3 * view
    }

    pub fn rotation(&self, view: usize) -> Vector3<f64> {
        let o = Self::rotation_offset(view);
        Vector3::new(
            self.learnables[o].as_f64(),
            self.learnables[o + 1].as_f64(),
            self.learnables[o + 2].as_f64(),
        )
    }

    pub fn translation(&self, view: usize) -> Vector3<f64> {
        let o = self.translation_offset(view);
        Vector3::new(
            self.learnables[o].as_f64(),
            self.learnables[o + 1].as_f64(),
            self.learnables[o + 2].as_f64(),
        )
    }

    pub fn set_rotation(&mut self, view: usize, w: Vector3<f64>) {
        let o = Self::rotation_offset(view);
        for i in 0..3 {
            self.learnables[o + i] = S::of(w[i]);
        }
    }

    pub fn set_translation(&mut self, view: usize, t: Vector3<f64>) {
        let o = self.translation_offset(view);
        for i in 0..3 {
            self.learnables[o + i] = S::of(t[i]);
        }
    }

    /// Base pose refined by the learnable residuals. Exactly the base pose
    /// while the residuals are zero.
    pub fn effective_pose(&self, view: usize) -> Pose {
        let base = &self.base_poses[view];
        let w = self.rotation(view);
        let t = self.translation(view);
        let rotation = if w == Vector3::zeros() {
            base.rotation
        } else {
            exp_so3(&w) * base.rotation
        };
        let translation = if t == Vector3::zeros() {
            base.translation
        } else {
            base.translation + t
        };
        Pose {
            rotation,
            translation,
        }
    }

    /// Camera-space direction (z = 1) through a pixel center.
    fn camera_direction(&self, px: &PixelRef) -> Vector3<f64> {
        let [x, y] = px.center();
        Vector3::new(
            (x - self.principal[0]) / self.fx(),
            (y - self.principal[1]) / self.fy(),
            1.0,
        )
    }
}

/// True once camera parameters are allowed to move.
pub fn camera_gate<S: Real>(t: usize, state: &CameraState<S>) -> bool {
    t >= state.trainable_from
}

/// Rays for a set of pixels with their ground-truth colors.
#[derive(Clone, Debug)]
pub struct RayBatch<S> {
    pub origins: Array2<S>,
    /// Unit directions.
    pub directions: Array2<S>,
    /// Norm of the unnormalized direction; a camera-space depth `z` lies at
    /// distance `z * depth_scale` along the ray.
    pub depth_scale: Array1<S>,
    pub pixels: Vec<PixelRef>,
    pub gt_rgb: Array2<S>,
}

impl<S: Real> RayBatch<S> {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Generates one pinhole ray per pixel center from the current camera state.
/// Rejects pixels that are masked in their source view.
pub fn generate_rays<S: Real>(
    state: &CameraState<S>,
    pixels: &[PixelRef],
    set: &PosedImageSet,
) -> Result<RayBatch<S>> {
    let n = pixels.len();
    let mut origins = Array2::zeros((n, 3));
    let mut directions = Array2::zeros((n, 3));
    let mut depth_scale = Array1::zeros(n);
    let mut gt_rgb = Array2::zeros((n, 3));
    let poses: Vec<Pose> = (0..state.num_views()).map(|v| state.effective_pose(v)).collect();
    for (i, px) in pixels.iter().enumerate() {
        if px.view >= poses.len() || px.view >= set.num_views() {
            return Err(Error::invalid(format!("pixel {px:?} refers to a missing view")));
        }
        let mask = &set.masks[px.view];
        if px.x as usize >= mask.width || px.y as usize >= mask.height {
            return Err(Error::invalid(format!("pixel {px:?} is outside the image")));
        }
        if mask.is_occluded(px.x as usize, px.y as usize) {
            return Err(Error::invalid(format!("pixel {px:?} is masked as occluded")));
        }
        let pose = &poses[px.view];
        let d = pose.rotation * state.camera_direction(px);
        let norm = d.norm();
        for c in 0..3 {
            origins[[i, c]] = S::of(pose.translation[c]);
            directions[[i, c]] = S::of(d[c] / norm);
        }
        depth_scale[i] = S::of(norm);
        let rgb = set.images[px.view].get(px.x as usize, px.y as usize);
        for c in 0..3 {
            gt_rgb[[i, c]] = S::of(rgb[c] as f64);
        }
    }
    Ok(RayBatch {
        origins,
        directions,
        depth_scale,
        pixels: pixels.to_vec(),
        gt_rgb,
    })
}

/// Adjoint of [`generate_rays`]: maps loss gradients with respect to each ray's
/// origin and unnormalized direction onto the camera learnables.
pub fn camera_backward<S: Real>(
    state: &CameraState<S>,
    pixels: &[PixelRef],
    grad_origin: &Array2<f64>,
    grad_dir_unnorm: &Array2<f64>,
) -> CameraGrads<S> {
    let mut grads = vec![0.0f64; state.learnables.len()];
    let views = state.num_views();
    let rotations: Vec<Matrix3<f64>> = (0..views)
        .map(|v| state.effective_pose(v).rotation)
        .collect();
    let jacobians: Vec<Matrix3<f64>> = (0..views)
        .map(|v| left_jacobian_so3(&state.rotation(v)).transpose())
        .collect();
    for (i, px) in pixels.iter().enumerate() {
        let v = px.view;
        let go = Vector3::new(grad_origin[[i, 0]], grad_origin[[i, 1]], grad_origin[[i, 2]]);
        let gd = Vector3::new(
            grad_dir_unnorm[[i, 0]],
            grad_dir_unnorm[[i, 1]],
            grad_dir_unnorm[[i, 2]],
        );
        let to = state.translation_offset(v);
        for c in 0..3 {
            grads[to + c] += go[c];
        }
        let d_cam = state.camera_direction(px);
        let d_world = rotations[v] * d_cam;
        let dw = jacobians[v] * d_world.cross(&gd);
        let ro = CameraState::<S>::rotation_offset(v);
        for c in 0..3 {
            grads[ro + c] += dw[c];
        }
        let g_cam = rotations[v].transpose() * gd;
        if state.tie_focal {
            grads[0] -= g_cam.x * d_cam.x + g_cam.y * d_cam.y;
        } else {
            grads[0] -= g_cam.x * d_cam.x;
            grads[1] -= g_cam.y * d_cam.y;
        }
    }
    grads.into_iter().map(S::of).collect()
}
