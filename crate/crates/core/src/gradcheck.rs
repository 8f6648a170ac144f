//! Central finite-difference verification of the analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{camera_gate, CameraState, PixelRef};
use crate::dataset::PosedImageSet;
use crate::error::Result;
use crate::field::mlp::FieldState;
use crate::pipeline::{forward_backward, loss_only, StepSettings};

/// Step for central differences. Larger steps let camera perturbations sweep
/// sample points across ReLU kinks.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub field_max_relative_error: f64,
    pub camera_max_relative_error: f64,
    pub field_checked: usize,
    pub camera_checked: usize,
    /// True when the camera gate was closed and every camera gradient was exactly zero.
    pub camera_gated_zero: Option<bool>,
    pub worst: Option<Mismatch>,
}

impl GradcheckReport {
    fn record(&mut self, m: Mismatch, camera: bool) {
        let e = m.relative_error;
        if camera {
            self.camera_max_relative_error = self.camera_max_relative_error.max(e);
            self.camera_checked += 1;
        } else {
            self.field_max_relative_error = self.field_max_relative_error.max(e);
            self.field_checked += 1;
        }
        if e >= self.max_relative_error {
            self.max_relative_error = e;
            self.worst = Some(m);
        }
    }
}

/// Compares `analytic[i]` against the central difference of `f` at each index.
pub fn check_indices<F>(mut f: F, x: &mut [f64], analytic: &[f64], indices: &[usize], eps: f64) -> Vec<(usize, f64, f64)>
where
    F: FnMut(&[f64]) -> f64,
{
    indices
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + eps;
            let fp = f(x);
            x[i] = orig - eps;
            let fm = f(x);
            x[i] = orig;
            (i, analytic[i], (fp - fm) / (2.0 * eps))
        })
        .collect()
}

fn flatten(field: &FieldState<f64>) -> (Vec<f64>, Vec<(String, usize)>) {
    let mut flat = Vec::new();
    let mut names = Vec::new();
    for (name, block) in field.params.blocks() {
        names.push((name, block.len()));
        flat.extend_from_slice(block);
    }
    (flat, names)
}

fn unflatten(field: &mut FieldState<f64>, flat: &[f64]) {
    let mut offset = 0;
    for block in field.params.blocks_mut() {
        let n = block.len();
        block.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

fn param_name(names: &[(String, usize)], mut i: usize) -> String {
    for (name, len) in names {
        if i < *len {
            return format!("{name}[{i}]");
        }
        i -= len;
    }
    format!("param[{i}]")
}

fn camera_name(views: usize, i: usize) -> String {
    match i {
        0 => "log_fx".into(),
        1 => "log_fy".into(),
        i if i < 2 + 3 * views => format!("rotation[{}][{}]", (i - 2) / 3, (i - 2) % 3),
        i => format!("translation[{}][{}]", (i - 2 - 3 * views) / 3, (i - 2 - 3 * views) % 3),
    }
}

/// Finite-difference check of the total loss with respect to `field_samples`
/// random field parameters and every camera parameter (when the gate is open).
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    field: &FieldState<f64>,
    camera: &CameraState<f64>,
    set: &PosedImageSet,
    pixels: &[PixelRef],
    settings: &StepSettings<'_>,
    eps: f64,
    field_samples: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let gate_open = camera_gate(settings.iteration, camera);
    let cfg = StepSettings {
        camera_trainable: gate_open,
        ..*settings
    };
    let analytic = forward_backward(field, camera, set, pixels, &cfg)?;
    let mut report = GradcheckReport::default();

    let (mut flat, names) = flatten(field);
    let (grad_flat, _) = flatten(&FieldState {
        config: field.config.clone(),
        params: analytic.field_grads.clone(),
    });
    let picks: Vec<usize> = index::sample(
        &mut ChaCha8Rng::seed_from_u64(seed),
        flat.len(),
        field_samples.min(flat.len()),
    )
    .into_vec();
    let mut probe = field.clone();
    let mut failure = None;
    let results = check_indices(
        |x| {
            unflatten(&mut probe, x);
            match loss_only(&probe, camera, set, pixels, &cfg) {
                Ok(b) => b.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &mut flat,
        &grad_flat,
        &picks,
        eps,
    );
    if let Some(e) = failure.take() {
        return Err(e);
    }
    for (i, a, n) in results {
        report.record(
            Mismatch {
                name: param_name(&names, i),
                analytic: a,
                numeric: n,
                relative_error: relative_error(a, n),
            },
            false,
        );
    }

    if !gate_open {
        report.camera_gated_zero = Some(analytic.camera_grads.iter().all(|&g| g == 0.0));
        return Ok(report);
    }
    let mut cam = camera.clone();
    let mut x = camera.learnables().to_vec();
    let indices: Vec<usize> = (0..x.len())
        .filter(|&i| !(camera.tie_focal() && i == 1))
        .collect();
    let results = check_indices(
        |v| {
            cam.learnables_mut().copy_from_slice(v);
            match loss_only(field, &cam, set, pixels, &cfg) {
                Ok(b) => b.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &mut x,
        &analytic.camera_grads,
        &indices,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    for (i, a, n) in results {
        report.record(
            Mismatch {
                name: camera_name(camera.num_views(), i),
                analytic: a,
                numeric: n,
                relative_error: relative_error(a, n),
            },
            true,
        );
    }
    Ok(report)
}
