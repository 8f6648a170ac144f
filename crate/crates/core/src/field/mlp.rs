//! Radiance-field MLP with hand-written backpropagation.
//!
//! Trunk: `depth` ReLU layers of `width` units over the position encoding, with
//! the encoding concatenated back in at `skip_layer`. Density comes from a
//! softplus head on the trunk output, before any direction input. Color comes
//! from a linear feature layer concatenated with the direction encoding, one
//! ReLU layer of `width / 2` units, and a sigmoid output.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{band_mask, encode_rows, encode_rows_backward, EncodingConfig};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub depth: usize,
    pub width: usize,
    /// Trunk layer whose input is concatenated with the position encoding.
    pub skip_layer: Option<usize>,
    /// World-space center and radius mapped onto `[-1, 1]^3` before encoding.
    pub scene_center: [f64; 3],
    pub scene_radius: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding: EncodingConfig::default(),
            depth: 8,
            width: 128,
            skip_layer: Some(4),
            scene_center: [0.0; 3],
            scene_radius: 1.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoding.pos_freqs < 1 {
            return Err(Error::Config("field.encoding.pos_freqs must be >= 1".into()));
        }
        if self.depth < 1 || self.width < 2 {
            return Err(Error::Config("field.depth must be >= 1 and field.width >= 2".into()));
        }
        if let Some(k) = self.skip_layer {
            if k == 0 || k >= self.depth {
                return Err(Error::Config(format!(
                    "field.skip_layer {k} must lie in 1..{}",
                    self.depth
                )));
            }
        }
        if !(self.scene_radius > 0.0) {
            return Err(Error::Config("field.scene_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Dense layer `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Real> Linear<S> {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((inputs, outputs), |_| S::of(rng.gen_range(-bound..bound)));
        let bias = Array1::from_shape_fn(outputs, |_| S::of(rng.gen_range(-bound..bound)));
        Linear { weight, bias }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    fn forward(&self, x: &ArrayView2<S>) -> Array2<S> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient if asked.
    fn backward(&self, x: &ArrayView2<S>, dy: &Array2<S>, grad: &mut Linear<S>, want_input: bool) -> Option<Array2<S>> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        want_input.then(|| dy.dot(&self.weight.t()))
    }

    fn cast<T: Real>(&self) -> Linear<T> {
        Linear {
            weight: self.weight.mapv(|v| T::of(v.as_f64())),
            bias: self.bias.mapv(|v| T::of(v.as_f64())),
        }
    }
}

/// All trainable tensors; also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams<S> {
    pub trunk: Vec<Linear<S>>,
    pub density: Linear<S>,
    pub feature: Linear<S>,
    pub color_hidden: Linear<S>,
    pub color_out: Linear<S>,
}

impl<S: Real> FieldParams<S> {
    pub fn zeros_like(&self) -> Self {
        FieldParams {
            trunk: self.trunk.iter().map(Linear::zeros_like).collect(),
            density: self.density.zeros_like(),
            feature: self.feature.zeros_like(),
            color_hidden: self.color_hidden.zeros_like(),
            color_out: self.color_out.zeros_like(),
        }
    }

    fn layers(&self) -> Vec<(String, &Linear<S>)> {
        let mut out: Vec<(String, &Linear<S>)> = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l))
            .collect();
        out.push(("density".into(), &self.density));
        out.push(("feature".into(), &self.feature));
        out.push(("color_hidden".into(), &self.color_hidden));
        out.push(("color_out".into(), &self.color_out));
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear<S>> {
        let mut out: Vec<&mut Linear<S>> = self.trunk.iter_mut().collect();
        out.push(&mut self.density);
        out.push(&mut self.feature);
        out.push(&mut self.color_hidden);
        out.push(&mut self.color_out);
        out
    }

    /// Named flat parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &[S])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), l.weight.as_slice().expect("contiguous")),
                    (format!("{name}.bias"), l.bias.as_slice().expect("contiguous")),
                ]
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("contiguous"),
                    l.bias.as_slice_mut().expect("contiguous"),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn add_assign(&mut self, other: &FieldParams<S>) {
        for (a, b) in self.layers_mut().into_iter().zip(other.layers()) {
            a.weight += &b.1.weight;
            a.bias += &b.1.bias;
        }
    }

    pub fn cast<T: Real>(&self) -> FieldParams<T> {
        FieldParams {
            trunk: self.trunk.iter().map(Linear::cast).collect(),
            density: self.density.cast(),
            feature: self.feature.cast(),
            color_hidden: self.color_hidden.cast(),
            color_out: self.color_out.cast(),
        }
    }
}

/// Network configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState<S> {
    pub config: FieldConfig,
    pub params: FieldParams<S>,
}

/// Intermediate activations kept for the backward pass.
pub struct FieldCache<S> {
    pos_norm: Array2<S>,
    dirs: Array2<S>,
    pos_mask: Vec<f64>,
    dir_mask: Vec<f64>,
    layer_inputs: Vec<Array2<S>>,
    trunk_out: Array2<S>,
    raw_sigma: Array1<S>,
    color_in: Array2<S>,
    color_hidden: Array2<S>,
    pub sigma: Array1<S>,
    pub rgb: Array2<S>,
}

pub(crate) fn softplus<S: Real>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn relu_inplace<S: Real>(a: &mut Array2<S>) {
    a.mapv_inplace(|v| v.max(S::zero()));
}

fn relu_backward<S: Real>(grad: &mut Array2<S>, activated: ArrayView2<S>) {
    grad.zip_mut_with(&activated, |g, &a| {
        if a <= S::zero() {
            *g = S::zero();
        }
    });
}

impl<S: Real> FieldState<S> {
    /// Freshly initialized network, uniform in `±1/sqrt(fan_in)` per layer.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos_w = config.encoding.pos_width();
        let dir_w = config.encoding.dir_width();
        let w = config.width;
        let mut trunk = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let inputs = if i == 0 {
                pos_w
            } else if config.skip_layer == Some(i) {
                w + pos_w
            } else {
                w
            };
            trunk.push(Linear::init(inputs, w, &mut rng));
        }
        let params = FieldParams {
            trunk,
            density: Linear::init(w, 1, &mut rng),
            feature: Linear::init(w, w, &mut rng),
            color_hidden: Linear::init(w + dir_w, w / 2, &mut rng),
            color_out: Linear::init(w / 2, 3, &mut rng),
        };
        Ok(FieldState { config, params })
    }

    pub fn cast<T: Real>(&self) -> FieldState<T> {
        FieldState {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn normalize_points(&self, points: &ArrayView2<S>) -> Array2<S> {
        let c = self.config.scene_center;
        let inv = S::of(1.0 / self.config.scene_radius);
        let mut out = points.to_owned();
        for mut row in out.outer_iter_mut() {
            for k in 0..3 {
                row[k] = (row[k] - S::of(c[k])) * inv;
            }
        }
        out
    }

    /// Evaluates density and color, keeping activations for [`Self::backward`].
    pub fn forward_cached(
        &self,
        points: ArrayView2<S>,
        dirs: ArrayView2<S>,
        f_max_pos: f64,
        f_max_dir: f64,
    ) -> FieldCache<S> {
        let enc = &self.config.encoding;
        let pos_mask = band_mask(enc.pos_freqs, f_max_pos, enc.smooth_band);
        let dir_mask = band_mask(enc.dir_freqs, f_max_dir, enc.smooth_band);
        let pos_norm = self.normalize_points(&points);
        let pos_enc = encode_rows(pos_norm.view(), &pos_mask, enc.include_identity);
        let dir_enc = encode_rows(dirs, &dir_mask, enc.include_identity);

        let mut layer_inputs = Vec::with_capacity(self.params.trunk.len());
        let mut h = pos_enc.clone();
        for (i, layer) in self.params.trunk.iter().enumerate() {
            let input = if i > 0 && self.config.skip_layer == Some(i) {
                concatenate![Axis(1), h, pos_enc]
            } else {
                h
            };
            let mut z = layer.forward(&input.view());
            relu_inplace(&mut z);
            layer_inputs.push(input);
            h = z;
        }
        let trunk_out = h;
        let raw_sigma = self.params.density.forward(&trunk_out.view()).column(0).to_owned();
        let sigma = raw_sigma.mapv(softplus);
        let feature = self.params.feature.forward(&trunk_out.view());
        let color_in = concatenate![Axis(1), feature, dir_enc];
        let mut color_hidden = self.params.color_hidden.forward(&color_in.view());
        relu_inplace(&mut color_hidden);
        let rgb = self.params.color_out.forward(&color_hidden.view()).mapv(sigmoid);
        FieldCache {
            pos_norm,
            dirs: dirs.to_owned(),
            pos_mask,
            dir_mask,
            layer_inputs,
            trunk_out,
            raw_sigma,
            color_in,
            color_hidden,
            sigma,
            rgb,
        }
    }

    /// Density (`N`) and color (`N × 3`) at world points for unit directions.
    pub fn forward(
        &self,
        points: ArrayView2<S>,
        dirs: ArrayView2<S>,
        f_max_pos: f64,
        f_max_dir: f64,
    ) -> (Array1<S>, Array2<S>) {
        let cache = self.forward_cached(points, dirs, f_max_pos, f_max_dir);
        (cache.sigma, cache.rgb)
    }

    /// Backpropagates `d_sigma` and `d_rgb` into `grads`. With `want_inputs`,
    /// also returns the gradients with respect to world points and unit directions.
    pub fn backward(
        &self,
        cache: &FieldCache<S>,
        d_sigma: &Array1<S>,
        d_rgb: &Array2<S>,
        grads: &mut FieldParams<S>,
        want_inputs: bool,
    ) -> Option<(Array2<S>, Array2<S>)> {
        let p = &self.params;
        let width = self.config.width;
        let enc = &self.config.encoding;

        let mut d_out = d_rgb.clone();
        d_out.zip_mut_with(&cache.rgb, |g, &c| *g = *g * c * (S::one() - c));
        let mut d_hidden = p
            .color_out
            .backward(&cache.color_hidden.view(), &d_out, &mut grads.color_out, true)
            .expect("input grad");
        relu_backward(&mut d_hidden, cache.color_hidden.view());
        let d_color_in = p
            .color_hidden
            .backward(&cache.color_in.view(), &d_hidden, &mut grads.color_hidden, true)
            .expect("input grad");
        let d_feature = d_color_in.slice(s![.., ..width]).to_owned();
        let d_dir_enc = d_color_in.slice(s![.., width..]).to_owned();

        let mut d_h = p
            .feature
            .backward(&cache.trunk_out.view(), &d_feature, &mut grads.feature, true)
            .expect("input grad");
        let mut d_raw = d_sigma.clone();
        d_raw.zip_mut_with(&cache.raw_sigma, |g, &r| *g = *g * sigmoid(r));
        let d_raw = d_raw.insert_axis(Axis(1));
        d_h += &p
            .density
            .backward(&cache.trunk_out.view(), &d_raw, &mut grads.density, true)
            .expect("input grad");

        let mut d_pos_enc: Option<Array2<S>> = None;
        for i in (0..p.trunk.len()).rev() {
            // Post-ReLU output of layer i: the trunk output, or the leading
            // `width` columns of the next layer's input.
            let activated = if i + 1 == p.trunk.len() {
                cache.trunk_out.view()
            } else {
                cache.layer_inputs[i + 1].slice(s![.., ..width])
            };
            relu_backward(&mut d_h, activated);
            let need_input = i > 0 || want_inputs;
            let Some(d_input) = p.trunk[i].backward(&cache.layer_inputs[i].view(), &d_h, &mut grads.trunk[i], need_input)
            else {
                break;
            };
            if i == 0 {
                match d_pos_enc.as_mut() {
                    Some(acc) => *acc += &d_input,
                    None => d_pos_enc = Some(d_input),
                }
                break;
            }
            if self.config.skip_layer == Some(i) {
                if want_inputs {
                    d_pos_enc = Some(d_input.slice(s![.., width..]).to_owned());
                }
                d_h = d_input.slice(s![.., ..width]).to_owned();
            } else {
                d_h = d_input;
            }
        }
        if !want_inputs {
            return None;
        }
        let d_pos_enc = d_pos_enc.expect("first layer gradient");
        let mut d_pos = encode_rows_backward(cache.pos_norm.view(), &cache.pos_mask, enc.include_identity, d_pos_enc.view());
        d_pos.mapv_inplace(|v| v * S::of(1.0 / self.config.scene_radius));
        let d_dir = encode_rows_backward(cache.dirs.view(), &cache.dir_mask, enc.include_identity, d_dir_enc.view());
        Some((d_pos, d_dir))
    }
}
