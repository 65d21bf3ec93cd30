//! Discrete variance-preserving noise schedules.
//!
//! Steps are numbered `1..=T` as in the reverse loop `for t = T, ..., 1`.
//! Internally the per-step arrays are 0-based: step `t` lives at index `t - 1`.
//! Step 0 denotes clean data (`alpha_bar = 1`) and has no transition.

use crate::error::{Error, Result};

/// Default step count.
pub const DEFAULT_STEPS: usize = 1000;
/// Default first beta of the linear schedule.
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
/// Default last beta of the linear schedule.
pub const DEFAULT_BETA_MAX: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas `beta_1..beta_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule(
                "at least one step is required".into(),
            ));
        }
        if let Some(i) = betas.iter().position(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidSchedule(format!(
                "beta_{} = {} outside (0, 1)",
                i + 1,
                betas[i]
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Betas interpolated linearly from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!("need T >= 2, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let span = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    /// Linear schedule whose betas are rescaled by `reference_steps / steps`, so
    /// that schedules with different step counts discretize the same
    /// continuous-time process as the `reference_steps` schedule.
    pub fn linear_rescaled(
        steps: usize,
        beta_min: f64,
        beta_max: f64,
        reference_steps: usize,
    ) -> Result<Self> {
        let k = reference_steps as f64 / steps as f64;
        Self::linear(steps, beta_min * k, beta_max * k)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_step(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_step(t)?])
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            Ok(self.alpha_bars[self.check_step(t)?])
        }
    }

    /// Variance of the reverse transition at step `t`; equals `beta_t` exactly.
    pub fn sigma_sq(&self, t: usize) -> Result<f64> {
        self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

/// Draws `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise` with caller-supplied noise.
pub fn forward_sample(
    x0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    crate::error::check_len(x0.len(), noise.len())?;
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}
