//! Iteration-indexed schedules: frequency ramp, camera gate, occlusion annealing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// User-facing schedule settings; resolved against the total iteration count
/// by [`ScheduleState::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Frequency ramp ends at this fraction of the run.
    pub freq_end_fraction: f64,
    /// Camera refinement starts at this fraction of the run.
    pub camera_start_fraction: f64,
    /// Couples the annealing end to the frequency ramp: `t_end = t_freq_end / λ`.
    pub lambda_anneal: f64,
    pub t_end_override: Option<usize>,
    pub t_start: usize,
    pub w_full: f64,
    pub w_s3im: f64,
    pub w_occ_coeff: f64,
    /// Leading fraction of each ray's samples penalized by the occlusion term.
    pub occ_near_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            freq_end_fraction: 0.1,
            camera_start_fraction: 0.2,
            lambda_anneal: 100.0,
            t_end_override: None,
            t_start: 0,
            w_full: 1.0,
            w_s3im: 0.01,
            w_occ_coeff: 0.01,
            occ_near_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub total_iters: usize,
    pub t_freq_end: usize,
    pub t_c: usize,
    pub lambda_anneal: f64,
    pub t_end: usize,
    pub t_start: usize,
    pub w_full: f64,
    pub w_s3im: f64,
    pub w_occ_coeff: f64,
    pub occ_near_fraction: f64,
}

/// `t_end = round(t_freq_end / λ)` unless explicitly overridden.
pub fn schedule_coupling(
    t_freq_end: usize,
    lambda_anneal: f64,
    t_start: usize,
    t_end_override: Option<usize>,
) -> Result<usize> {
    let t_end = match t_end_override {
        Some(t) => t,
        None => {
            if !(lambda_anneal > 0.0) {
                return Err(Error::Config(format!("lambda_anneal must be positive, got {lambda_anneal}")));
            }
            (t_freq_end as f64 / lambda_anneal).round() as usize
        }
    };
    if t_end <= t_start {
        return Err(Error::Config(format!("t_end {t_end} must exceed t_start {t_start}")));
    }
    Ok(t_end)
}

impl ScheduleState {
    pub fn resolve(total_iters: usize, cfg: &ScheduleConfig) -> Result<Self> {
        if total_iters == 0 {
            return Err(Error::Config("total_iters must be positive".into()));
        }
        for (name, v) in [
            ("freq_end_fraction", cfg.freq_end_fraction),
            ("camera_start_fraction", cfg.camera_start_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("schedule.{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(cfg.occ_near_fraction > 0.0 && cfg.occ_near_fraction <= 1.0) {
            return Err(Error::Config("schedule.occ_near_fraction must lie in (0, 1]".into()));
        }
        let t = total_iters as f64;
        let t_freq_end = ((cfg.freq_end_fraction * t).round() as usize).max(1);
        let t_c = (cfg.camera_start_fraction * t).round() as usize;
        let t_end = match schedule_coupling(t_freq_end, cfg.lambda_anneal, cfg.t_start, cfg.t_end_override) {
            Ok(t) => t,
            // Very short runs round the coupled end down onto the start.
            Err(_) if cfg.t_end_override.is_none() && cfg.lambda_anneal > 0.0 => {
                log::warn!("coupled t_end collapses onto t_start={}; using t_start + 1", cfg.t_start);
                cfg.t_start + 1
            }
            Err(e) => return Err(e),
        };
        let state = ScheduleState {
            total_iters,
            t_freq_end,
            t_c,
            lambda_anneal: cfg.lambda_anneal,
            t_end,
            t_start: cfg.t_start,
            w_full: cfg.w_full,
            w_s3im: cfg.w_s3im,
            w_occ_coeff: cfg.w_occ_coeff,
            occ_near_fraction: cfg.occ_near_fraction,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t_start < self.t_end
            && self.t_end <= self.total_iters
            && self.t_freq_end > 0
            && self.t_freq_end <= self.total_iters
            && self.t_c <= self.total_iters;
        if !ok {
            return Err(Error::Config(format!(
                "inconsistent schedule: t_start={} t_end={} t_freq_end={} t_c={} T={}",
                self.t_start, self.t_end, self.t_freq_end, self.t_c, self.total_iters
            )));
        }
        Ok(())
    }

    /// Progress of the frequency ramp in `[0, 1]`.
    pub fn frequency_fraction(&self, t: usize) -> f64 {
        (t as f64 / self.t_freq_end as f64).min(1.0)
    }
}

/// Highest open band for an encoding with `freqs` bands at iteration `t`.
pub fn frequency_max(t: usize, schedule: &ScheduleState, freqs: usize) -> f64 {
    freqs as f64 * schedule.frequency_fraction(t)
}

/// Cosine ramp of the occlusion weight from 0 at `t_start` to `w_full` at `t_end`.
pub fn occ_weight(t: usize, s: &ScheduleState) -> f64 {
    if t < s.t_start {
        0.0
    } else if t < s.t_end {
        let span = (s.t_end - s.t_start) as f64;
        let x = (s.t_end - t) as f64 / span;
        0.5 * s.w_full * (1.0 + (PI * x).cos())
    } else {
        s.w_full
    }
}
