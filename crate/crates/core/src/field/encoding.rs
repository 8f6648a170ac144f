//! Sinusoidal positional encoding with per-band frequency masks.
//!
//! Output layout for a `D`-component input: the `D` raw components (when
//! `include_identity`), then for each component `c` and band `j` the pair
//! `(sin(2^j π p_c), cos(2^j π p_c))`, each scaled by the band mask `m_j`.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    /// Frequency bands for positions.
    pub pos_freqs: usize,
    /// Frequency bands for view directions.
    pub dir_freqs: usize,
    pub include_identity: bool,
    /// Open the boundary band fractionally instead of the hard 0/1 mask.
    pub smooth_band: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            pos_freqs: 10,
            dir_freqs: 4,
            include_identity: true,
            smooth_band: false,
        }
    }
}

impl EncodingConfig {
    pub fn pos_width(&self) -> usize {
        encoded_width(3, self.pos_freqs, self.include_identity)
    }

    pub fn dir_width(&self) -> usize {
        encoded_width(3, self.dir_freqs, self.include_identity)
    }
}

pub fn encoded_width(components: usize, freqs: usize, include_identity: bool) -> usize {
    components * (2 * freqs + usize::from(include_identity))
}

/// Band gates for `f_max`: band `j` is open when `j < floor(f_max)`. With
/// `smooth`, band `floor(f_max)` is additionally opened by `frac(f_max)`.
pub fn band_mask(freqs: usize, f_max: f64, smooth: bool) -> Vec<f64> {
    let f = f_max.clamp(0.0, freqs as f64);
    let whole = f.floor();
    (0..freqs)
        .map(|j| {
            let j = j as f64;
            if j < whole {
                1.0
            } else if smooth && j == whole {
                f - whole
            } else {
                0.0
            }
        })
        .collect()
}

/// Encodes a single vector of components.
pub fn positional_encoding<S: Real>(
    p: &[S],
    freqs: usize,
    f_max: f64,
    include_identity: bool,
    smooth: bool,
) -> Vec<S> {
    let mask = band_mask(freqs, f_max, smooth);
    let input = ArrayView2::from_shape((1, p.len()), p).expect("row view");
    encode_rows(input, &mask, include_identity).into_raw_vec_and_offset().0
}

/// Encodes each row of `input` with a precomputed band mask.
pub fn encode_rows<S: Real>(input: ArrayView2<S>, mask: &[f64], include_identity: bool) -> Array2<S> {
    let (rows, comps) = input.dim();
    let freqs = mask.len();
    let width = encoded_width(comps, freqs, include_identity);
    let mut out = Array2::zeros((rows, width));
    let scales: Vec<S> = (0..freqs).map(|j| S::of(2f64.powi(j as i32) * PI)).collect();
    let gates: Vec<S> = mask.iter().map(|&m| S::of(m)).collect();
    let id = if include_identity { comps } else { 0 };
    for (r, row) in input.outer_iter().enumerate() {
        let mut o = out.row_mut(r);
        for c in 0..comps {
            if include_identity {
                o[c] = row[c];
            }
            let base = id + c * 2 * freqs;
            for j in 0..freqs {
                if gates[j] == S::zero() {
                    continue;
                }
                let (s, co) = (scales[j] * row[c]).sin_cos();
                o[base + 2 * j] = gates[j] * s;
                o[base + 2 * j + 1] = gates[j] * co;
            }
        }
    }
    out
}

/// Gradient of a scalar with respect to the encoder input, given its gradient
/// with respect to the encoded rows.
pub fn encode_rows_backward<S: Real>(
    input: ArrayView2<S>,
    mask: &[f64],
    include_identity: bool,
    grad_out: ArrayView2<S>,
) -> Array2<S> {
    let (rows, comps) = input.dim();
    let freqs = mask.len();
    let mut grad = Array2::zeros((rows, comps));
    let scales: Vec<S> = (0..freqs).map(|j| S::of(2f64.powi(j as i32) * PI)).collect();
    let gates: Vec<S> = mask.iter().map(|&m| S::of(m)).collect();
    let id = if include_identity { comps } else { 0 };
    for r in 0..rows {
        for c in 0..comps {
            let x = input[[r, c]];
            let mut g = if include_identity { grad_out[[r, c]] } else { S::zero() };
            let base = id + c * 2 * freqs;
            for j in 0..freqs {
                if gates[j] == S::zero() {
                    continue;
                }
                let (s, co) = (scales[j] * x).sin_cos();
                let k = gates[j] * scales[j];
                g += k * (co * grad_out[[r, base + 2 * j]] - s * grad_out[[r, base + 2 * j + 1]]);
            }
            grad[[r, c]] = g;
        }
    }
    grad
}
