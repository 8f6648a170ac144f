use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub steps: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update. `params` and `grads` are visited block by
    /// block in the same order every call.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>, lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient blocks differ");
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let step_size = (lr * bc2.sqrt() / bc1) as f32;
        let eps_hat = (c.eps * bc2.sqrt()) as f32;
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            assert_eq!(p.len(), g.len());
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
            offset += p.len();
        }
        assert_eq!(offset, self.m.len(), "moment length mismatch");
    }
}

/// Exponential decay from `start` at t = 0 to `end` at t = total.
pub fn decayed_lr(start: f64, end: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    start * (end / start).powf(t as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new(3, AdamConfig::default());
        let mut p = vec![1.0f32, -2.0, 0.5];
        let g = vec![0.3f32, -4.0, 0.0];
        opt.step(vec![&mut p[..]], vec![&g[..]], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new(2, AdamConfig::default());
        let mut p = vec![3.0f32, -1.5];
        for _ in 0..2000 {
            let g: Vec<f32> = p.iter().map(|x| 2.0 * (x - 0.25)).collect();
            opt.step(vec![&mut p[..]], vec![&g[..]], 0.01);
        }
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn decay_endpoints() {
        assert_eq!(decayed_lr(5e-4, 5e-5, 0, 100), 5e-4);
        assert!((decayed_lr(5e-4, 5e-5, 100, 100) - 5e-5).abs() < 1e-18);
        assert!((decayed_lr(5e-4, 5e-5, 50, 100) - (5e-4f64 * 5e-5).sqrt()).abs() < 1e-15);
    }
}
