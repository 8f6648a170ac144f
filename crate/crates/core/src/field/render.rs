//! Quadrature volume rendering shared by the learned field and the scene oracle.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    /// Camera-space depth bounds.
    pub near: f64,
    pub far: f64,
    pub stratified: bool,
    pub white_background: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            near: 1.0,
            far: 6.0,
            stratified: true,
            white_background: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::Config("samples_per_ray must be >= 2".into()));
        }
        if !(self.near < self.far) {
            return Err(Error::Config(format!("need near < far, got {} and {}", self.near, self.far)));
        }
        Ok(())
    }
}

/// Sample depths in `[near, far)`: bin midpoints, or one uniform jitter per
/// bin when an RNG is supplied.
pub fn sample_depths<R: Rng>(n: usize, near: f64, far: f64, jitter: Option<&mut R>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    match jitter {
        Some(rng) => (0..n)
            .map(|k| near + (k as f64 + rng.gen::<f64>()) * step)
            .collect(),
        None => (0..n).map(|k| near + (k as f64 + 0.5) * step).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput<S> {
    pub rgb: Array2<S>,
    pub sigma: Array2<S>,
    pub weights: Array2<S>,
    pub opacity: Array1<S>,
    /// Transmittance after each sample (`T_{k+1}`), kept for the backward pass.
    transmittance_after: Array2<S>,
}

/// Alpha compositing with `α_k = 1 − exp(−σ_k δ_k)`, `δ_k = d_{k+1} − d_k` and
/// the last interval closed at the ray's `far` distance.
pub fn volume_render<S: Real>(
    sigma: ArrayView2<S>,
    rgb: ArrayView3<S>,
    depths: ArrayView2<S>,
    far: ArrayView1<S>,
    white_background: bool,
) -> Result<RenderOutput<S>> {
    let (rays, n) = sigma.dim();
    if rgb.dim() != (rays, n, 3) || depths.dim() != (rays, n) || far.len() != rays {
        return Err(Error::invalid("volume_render shape mismatch"));
    }
    let deltas = intervals(depths, far)?;
    let bg = if white_background { S::one() } else { S::zero() };
    let mut out_rgb = Array2::zeros((rays, 3));
    let mut weights = Array2::zeros((rays, n));
    let mut opacity = Array1::zeros(rays);
    let mut t_after = Array2::zeros((rays, n));
    for r in 0..rays {
        let mut trans = S::one();
        let mut acc = [S::zero(); 3];
        let mut wsum = S::zero();
        for k in 0..n {
            let tau = sigma[[r, k]] * deltas[[r, k]];
            let alpha = -(-tau).exp_m1();
            let w = trans * alpha;
            weights[[r, k]] = w;
            for c in 0..3 {
                acc[c] += w * rgb[[r, k, c]];
            }
            wsum += w;
            trans = trans * (-tau).exp();
            t_after[[r, k]] = trans;
        }
        for c in 0..3 {
            out_rgb[[r, c]] = acc[c] + trans * bg;
        }
        opacity[r] = wsum;
    }
    Ok(RenderOutput {
        rgb: out_rgb,
        sigma: sigma.to_owned(),
        weights,
        opacity,
        transmittance_after: t_after,
    })
}

/// Per-sample interval lengths; rejects depths that are not strictly increasing.
pub fn intervals<S: Real>(depths: ArrayView2<S>, far: ArrayView1<S>) -> Result<Array2<S>> {
    let (rays, n) = depths.dim();
    let mut deltas = Array2::zeros((rays, n));
    for r in 0..rays {
        for k in 0..n {
            let next = if k + 1 < n { depths[[r, k + 1]] } else { far[r] };
            let d = next - depths[[r, k]];
            if !(d > S::zero()) && (k + 1 < n || d < S::zero()) {
                return Err(Error::invalid(format!("depths along ray {r} are not strictly increasing at sample {k}")));
            }
            deltas[[r, k]] = d;
        }
    }
    Ok(deltas)
}

/// Gradients of a scalar loss through [`volume_render`].
pub struct RenderGrads<S> {
    pub sigma: Array2<S>,
    pub rgb: Array3<S>,
    /// With respect to each interval length `δ_k`.
    pub delta: Array2<S>,
}

/// Adjoint of [`volume_render`]. `d_sigma_direct` adds loss terms that read the
/// densities directly.
pub fn volume_render_backward<S: Real>(
    out: &RenderOutput<S>,
    rgb: ArrayView3<S>,
    deltas: ArrayView2<S>,
    d_out_rgb: ArrayView2<S>,
    d_sigma_direct: Option<ArrayView2<S>>,
    white_background: bool,
) -> RenderGrads<S> {
    let (rays, n) = out.sigma.dim();
    let bg = if white_background { S::one() } else { S::zero() };
    let mut d_sigma = match d_sigma_direct {
        Some(d) => d.to_owned(),
        None => Array2::zeros((rays, n)),
    };
    let mut d_rgb = Array3::zeros((rays, n, 3));
    let mut d_delta = Array2::zeros((rays, n));
    for r in 0..rays {
        let g = [d_out_rgb[[r, 0]], d_out_rgb[[r, 1]], d_out_rgb[[r, 2]]];
        // suffix = Σ_{j>k} w_j c_j + T_N · bg, swept from the back.
        let t_end = out.transmittance_after[[r, n - 1]];
        let mut suffix = [t_end * bg; 3];
        for k in (0..n).rev() {
            let w = out.weights[[r, k]];
            let t_next = out.transmittance_after[[r, k]];
            let mut d_tau = S::zero();
            for c in 0..3 {
                let col = rgb[[r, k, c]];
                d_rgb[[r, k, c]] = w * g[c];
                d_tau += g[c] * (t_next * col - suffix[c]);
                suffix[c] += w * col;
            }
            d_sigma[[r, k]] += d_tau * deltas[[r, k]];
            d_delta[[r, k]] = d_tau * out.sigma[[r, k]];
        }
    }
    RenderGrads {
        sigma: d_sigma,
        rgb: d_rgb,
        delta: d_delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn single_ray(sigma: &[f64], depths: &[f64], far: f64, color: [f64; 3]) -> RenderOutput<f64> {
        let n = sigma.len();
        let s = Array::from_shape_vec((1, n), sigma.to_vec()).unwrap();
        let d = Array::from_shape_vec((1, n), depths.to_vec()).unwrap();
        let c = Array3::from_shape_fn((1, n, 3), |(_, _, k)| color[k]);
        volume_render(s.view(), c.view(), d.view(), Array1::from_elem(1, far).view(), false).unwrap()
    }

    #[test]
    fn empty_space_is_black() {
        let out = single_ray(&[0.0; 8], &[1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5], 5.0, [1.0; 3]);
        assert!(out.rgb.iter().all(|&v| v == 0.0));
        assert_eq!(out.opacity[0], 0.0);
    }

    #[test]
    fn single_segment_opacity() {
        let out = single_ray(&[2.0, 0.0], &[0.0, 1.0], 2.0, [1.0; 3]);
        assert!((out.opacity[0] - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn non_monotone_depths_rejected() {
        let s = Array2::<f64>::zeros((1, 3));
        let c = Array3::<f64>::zeros((1, 3, 3));
        let d = Array::from_shape_vec((1, 3), vec![1.0, 0.5, 2.0]).unwrap();
        assert!(volume_render(s.view(), c.view(), d.view(), Array1::from_elem(1, 3.0).view(), false).is_err());
    }

    #[test]
    fn weights_sum_matches_total_optical_depth() {
        let sigma = [0.3, 1.7, 0.0, 4.0, 0.2];
        let depths = [0.0, 0.2, 0.5, 0.9, 1.0];
        let out = single_ray(&sigma, &depths, 1.4, [0.5; 3]);
        let tau: f64 = sigma
            .iter()
            .zip([0.2, 0.3, 0.4, 0.1, 0.4])
            .map(|(s, d)| s * d)
            .sum();
        assert!((out.weights.sum() - (1.0 - (-tau).exp())).abs() < 1e-12);
        assert!(out.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn backward_matches_finite_difference() {
        let sigma = vec![0.3, 1.7, 0.4, 2.0];
        let depths = vec![0.0, 0.2, 0.5, 0.9];
        let colors: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let g = [0.7, -1.1, 0.4];
        let far = 1.3;
        let loss = |s: &[f64], d: &[f64], c: &[f64], far: f64| {
            let sa = Array::from_shape_vec((1, 4), s.to_vec()).unwrap();
            let da = Array::from_shape_vec((1, 4), d.to_vec()).unwrap();
            let ca = Array::from_shape_vec((1, 4, 3), c.to_vec()).unwrap();
            let o = volume_render(sa.view(), ca.view(), da.view(), Array1::from_elem(1, far).view(), true).unwrap();
            (0..3).map(|k| o.rgb[[0, k]] * g[k]).sum::<f64>()
        };
        let sa = Array::from_shape_vec((1, 4), sigma.clone()).unwrap();
        let da = Array::from_shape_vec((1, 4), depths.clone()).unwrap();
        let ca = Array::from_shape_vec((1, 4, 3), colors.clone()).unwrap();
        let fa = Array1::from_elem(1, far);
        let out = volume_render(sa.view(), ca.view(), da.view(), fa.view(), true).unwrap();
        let deltas = intervals(da.view(), fa.view()).unwrap();
        let gr = Array::from_shape_vec((1, 3), g.to_vec()).unwrap();
        let grads = volume_render_backward(&out, ca.view(), deltas.view(), gr.view(), None, true);
        let eps = 1e-7;
        for k in 0..4 {
            let mut p = sigma.clone();
            let mut m = sigma.clone();
            p[k] += eps;
            m[k] -= eps;
            let fd = (loss(&p, &depths, &colors, far) - loss(&m, &depths, &colors, far)) / (2.0 * eps);
            assert!((fd - grads.sigma[[0, k]]).abs() < 1e-7, "sigma {k}");
        }
        for i in 0..12 {
            let mut p = colors.clone();
            let mut m = colors.clone();
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(&sigma, &depths, &p, far) - loss(&sigma, &depths, &m, far)) / (2.0 * eps);
            assert!((fd - grads.rgb[[0, i / 3, i % 3]]).abs() < 1e-7, "color {i}");
        }
        // A shift of the far bound only changes the last interval.
        let fd = (loss(&sigma, &depths, &colors, far + eps) - loss(&sigma, &depths, &colors, far - eps)) / (2.0 * eps);
        assert!((fd - grads.delta[[0, 3]]).abs() < 1e-7);
    }
}
