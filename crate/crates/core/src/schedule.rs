//! Diffusion noise schedule.
//!
//! A [`NoiseSchedule`] holds the per-step noise rates `beta[t]`, the retention
//! rates `alpha[t] = 1 - beta[t]` and their running products `alpha_bar[t]`,
//! with `alpha_bar[0] = 1` so that step 1 needs no special case.

use crate::error::{invalid_arg, Result};
use crate::scalar::Scalar;

/// Raw cosine values fall below this at the terminal step; clamping keeps the
/// posterior denominators alive.
pub const ALPHA_BAR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S: Scalar> {
    steps: usize,
    offset: S,
    alpha_bar: Vec<S>,
    alpha: Vec<S>,
    beta: Vec<S>,
}

/// Per-step scalars returned by [`NoiseSchedule::lookup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams<S> {
    pub beta: S,
    pub alpha: S,
    pub alpha_bar: S,
    pub alpha_bar_prev: S,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Cosine schedule:
    /// `alpha_bar[t] = cos(((t/T + s) / (1 + s)) * pi/2)^2 / cos((s / (1 + s)) * pi/2)^2`,
    /// evaluated in f64, clamped to `[1e-9, 1]`, then cast to `S`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid_arg("schedule needs at least one step"));
        }
        if !(offset > 0.0) {
            return Err(invalid_arg(format!("schedule offset must be > 0, got {offset}")));
        }
        let denom = ((offset / (1.0 + offset)) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2);
        let raw = |t: usize| -> f64 {
            let phase = ((t as f64 / steps as f64 + offset) / (1.0 + offset))
                * std::f64::consts::FRAC_PI_2;
            (phase.cos().powi(2) / denom).clamp(ALPHA_BAR_FLOOR, 1.0)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(S::one());
        for t in 1..=steps {
            alpha_bar.push(S::of(raw(t)));
        }
        Self::from_alpha_bar(alpha_bar, S::of(offset))
    }

    /// Build the derived `alpha`/`beta` tables and validate the invariants.
    fn from_alpha_bar(alpha_bar: Vec<S>, offset: S) -> Result<Self> {
        let steps = alpha_bar.len() - 1;
        if alpha_bar[0] != S::one() {
            return Err(invalid_arg("alpha_bar[0] must be exactly 1"));
        }
        for t in 1..=steps {
            if alpha_bar[t] >= alpha_bar[t - 1] {
                return Err(invalid_arg(format!(
                    "alpha_bar must be strictly decreasing (flat at t={t}; \
                     the step count is too large for the clamp floor)"
                )));
            }
        }
        let alpha: Vec<S> = (1..=steps).map(|t| alpha_bar[t] / alpha_bar[t - 1]).collect();
        let beta: Vec<S> = alpha.iter().map(|&a| S::one() - a).collect();
        Ok(Self {
            steps,
            offset,
            alpha_bar,
            alpha,
            beta,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> S {
        self.offset
    }

    /// `alpha_bar[t]` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<S> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| invalid_arg(format!("alpha_bar index {t} > T={}", self.steps)))
    }

    /// All four per-step scalars for `1 <= t <= T`.
    pub fn lookup(&self, t: usize) -> Result<StepParams<S>> {
        if t == 0 || t > self.steps {
            return Err(invalid_arg(format!(
                "step index {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(StepParams {
            beta: self.beta[t - 1],
            alpha: self.alpha[t - 1],
            alpha_bar: self.alpha_bar[t],
            alpha_bar_prev: self.alpha_bar[t - 1],
        })
    }

    /// Evenly spaced sub-schedule with `steps` entries for accelerated
    /// sampling. Returns the derived schedule together with the original step
    /// index each new step maps to (used for the model's time conditioning).
    ///
    /// With `steps == T` the result is identical to `self`.
    pub fn respaced(&self, steps: usize) -> Result<(Self, Vec<usize>)> {
        if steps == 0 || steps > self.steps {
            return Err(invalid_arg(format!(
                "respacing to {steps} steps requires 1..={}",
                self.steps
            )));
        }
        let original_t: Vec<usize> = (1..=steps).map(|k| k * self.steps / steps).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(S::one());
        for &t in &original_t {
            alpha_bar.push(self.alpha_bar[t]);
        }
        let sub = Self::from_alpha_bar(alpha_bar, self.offset)?;
        Ok((sub, original_t))
    }
}
