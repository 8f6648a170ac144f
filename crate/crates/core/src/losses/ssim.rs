//! Uniform-window SSIM over `H × W × C` arrays, with its analytic gradient.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::real::Real;

/// Stabilizers for unit dynamic range: `(0.01)^2` and `(0.03)^2`.
pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimWindow {
    pub size: usize,
    pub stride: usize,
    pub c1: f64,
    pub c2: f64,
}

impl SsimWindow {
    pub fn new(size: usize, stride: usize) -> Self {
        SsimWindow {
            size,
            stride,
            c1: C1,
            c2: C2,
        }
    }

    fn starts(&self, extent: usize) -> Vec<usize> {
        if extent < self.size {
            return Vec::new();
        }
        (0..=extent - self.size).step_by(self.stride.max(1)).collect()
    }
}

struct WindowStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn window_stats<S: Real>(a: &ArrayView3<S>, b: &ArrayView3<S>, y0: usize, x0: usize, w: usize, c: usize) -> WindowStats {
    let n = (w * w) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + w {
        for x in x0..x0 + w {
            sa += a[[y, x, c]].as_f64();
            sb += b[[y, x, c]].as_f64();
        }
    }
    let (mu_a, mu_b) = (sa / n, sb / n);
    let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
    for y in y0..y0 + w {
        for x in x0..x0 + w {
            let da = a[[y, x, c]].as_f64() - mu_a;
            let db = b[[y, x, c]].as_f64() - mu_b;
            va += da * da;
            vb += db * db;
            cv += da * db;
        }
    }
    WindowStats {
        mu_a,
        mu_b,
        var_a: va / n,
        var_b: vb / n,
        cov: cv / n,
    }
}

/// Mean SSIM over all windows and channels, and optionally its gradient with
/// respect to `a`. Statistics are accumulated in `f64`.
pub fn ssim_windows<S: Real>(
    a: ArrayView3<S>,
    b: ArrayView3<S>,
    window: SsimWindow,
    want_grad: bool,
) -> Result<(f64, Option<Array3<S>>)> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("ssim inputs differ in shape"));
    }
    let (h, w, channels) = a.dim();
    let ys = window.starts(h);
    let xs = window.starts(w);
    if ys.is_empty() || xs.is_empty() || window.size == 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} image is too small for a {} window",
            window.size
        )));
    }
    let count = (ys.len() * xs.len() * channels) as f64;
    let n = (window.size * window.size) as f64;
    let mut grad = want_grad.then(|| vec![0.0f64; h * w * channels]);
    let mut total = 0.0;
    for c in 0..channels {
        for &y0 in &ys {
            for &x0 in &xs {
                let st = window_stats(&a, &b, y0, x0, window.size, c);
                let a1 = 2.0 * st.mu_a * st.mu_b + window.c1;
                let a2 = 2.0 * st.cov + window.c2;
                let b1 = st.mu_a * st.mu_a + st.mu_b * st.mu_b + window.c1;
                let b2 = st.var_a + st.var_b + window.c2;
                let value = a1 * a2 / (b1 * b2);
                total += value;
                if let Some(g) = grad.as_mut() {
                    let inv = 1.0 / (b1 * b2 * count);
                    for y in y0..y0 + window.size {
                        for x in x0..x0 + window.size {
                            let xa = a[[y, x, c]].as_f64();
                            let yb = b[[y, x, c]].as_f64();
                            let d = (2.0 * st.mu_b / n) * a2 + a1 * 2.0 * (yb - st.mu_b) / n
                                - value * b1 * b2 * ((2.0 * st.mu_a / n) / b1 + 2.0 * (xa - st.mu_a) / n / b2);
                            g[(y * w + x) * channels + c] += d * inv;
                        }
                    }
                }
            }
        }
    }
    let grad = grad.map(|g| Array3::from_shape_vec((h, w, channels), g.into_iter().map(S::of).collect()).expect("shape"));
    Ok((total / count, grad))
}
