//! Guidance combinators in noise-prediction space and the posterior tracker.
//!
//! Since `eps = -sqrt(1 - ab) * score` is linear with the same coefficient for
//! every model at a given step, each combination below reads identically in
//! score space and in noise space.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schedule::NoiseSchedule;

/// Which guidance rule a reverse chain applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Plain unconditional sampling.
    None,
    /// Classifier-free guidance toward the allowed modes.
    Cfg,
    /// Negative prompting away from the forbidden modes with a constant scale.
    Np,
    /// Dynamic negative guidance driven by the closed-form posterior.
    DngExact,
    /// Dynamic negative guidance driven by the Markov-chain posterior tracker.
    DngTracked,
    /// Elementwise thresholded guidance with momentum.
    Sld,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::None,
        Scheme::Cfg,
        Scheme::Np,
        Scheme::DngExact,
        Scheme::DngTracked,
        Scheme::Sld,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::Cfg => "cfg",
            Scheme::Np => "np",
            Scheme::DngExact => "dng_exact",
            Scheme::DngTracked => "dng_tracked",
            Scheme::Sld => "sld",
        }
    }

    pub fn is_dng(self) -> bool {
        matches!(self, Scheme::DngExact | Scheme::DngTracked)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidGuidance(format!("unknown scheme '{s}'")))
    }
}

/// How a guidance term enters the combined noise prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combination {
    /// `eps_u + lambda (eps_c - eps_u)`
    Cfg,
    /// `eps_u - lambda (eps_c - eps_u)`
    Np,
    /// Same algebra as [`Combination::Np`], with a state-dependent lambda.
    Dng,
}

/// Hyperparameters of the thresholded elementwise baseline.
///
/// `scale` is the saturation gain written `s_g` in the guidance rule and
/// `s_s` in the reported hyperparameters; both name the same quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SldConfig {
    pub threshold: f64,
    pub scale: f64,
    pub momentum_beta: f64,
    pub momentum_scale: f64,
    pub warmup_steps: usize,
}

impl Default for SldConfig {
    fn default() -> Self {
        Self {
            threshold: 0.04,
            scale: 100.0,
            momentum_beta: 0.2,
            momentum_scale: 0.1,
            warmup_steps: 0,
        }
    }
}

impl SldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidGuidance(
                "sld.threshold must be positive".into(),
            ));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidGuidance("sld.scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::InvalidGuidance(
                "sld.momentum_beta must lie in [0, 1)".into(),
            ));
        }
        if !self.momentum_scale.is_finite() {
            return Err(Error::InvalidGuidance(
                "sld.momentum_scale must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Scheme selector plus every guidance hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub scheme: Scheme,
    pub lambda0: f64,
    pub prior: f64,
    pub tau: f64,
    pub delta: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub sld: Option<SldConfig>,
}

pub const DEFAULT_P_MIN: f64 = 1e-6;
pub const DEFAULT_P_MAX: f64 = 0.999;

impl GuidanceConfig {
    /// Tracker settings for a large prior and no offset: `p0 = 0.25, tau = 0.25, delta = 0`.
    pub fn high_prior(scheme: Scheme, lambda0: f64) -> Self {
        Self {
            scheme,
            lambda0,
            prior: 0.25,
            tau: 0.25,
            delta: 0.0,
            p_min: DEFAULT_P_MIN,
            p_max: DEFAULT_P_MAX,
            sld: (scheme == Scheme::Sld).then(SldConfig::default),
        }
    }

    /// Tracker settings for a small prior with a small offset: `p0 = 0.01, tau = 0.2, delta = 2e-4`.
    pub fn low_prior(scheme: Scheme, lambda0: f64) -> Self {
        Self {
            prior: 0.01,
            tau: 0.2,
            delta: 2e-4,
            ..Self::high_prior(scheme, lambda0)
        }
    }

    pub fn unguided() -> Self {
        Self::high_prior(Scheme::None, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidGuidance(m.to_string()));
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return bad("lambda0 must be finite and non-negative");
        }
        if !(self.p_min > 0.0 && self.p_min <= self.p_max && self.p_max < 1.0) {
            return bad("need 0 < p_min <= p_max < 1");
        }
        if !(self.prior >= self.p_min && self.prior <= self.p_max) {
            return bad("prior must lie in [p_min, p_max]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad("delta must be finite and non-negative");
        }
        match (&self.sld, self.scheme) {
            (Some(sld), Scheme::Sld) => sld.validate(),
            (None, Scheme::Sld) => bad("scheme sld requires sld parameters"),
            (Some(_), _) => bad("sld parameters given for a non-sld scheme"),
            (None, _) => Ok(()),
        }
    }
}

/// `lambda0 * p / (1 - p)`.
pub fn dynamic_lambda(p: f64, lambda0: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok(lambda0 * p / (1.0 - p))
}

/// `lambda0 * exp(log_odds)`: the dynamic scale from posterior log-odds.
pub fn dynamic_lambda_from_log_odds(log_odds: f64, lambda0: f64) -> f64 {
    if lambda0 == 0.0 {
        0.0
    } else {
        lambda0 * log_odds.exp()
    }
}

/// DNG combination with the scale given as `lambda0 * exp(log_odds)`.
///
/// Identical to [`combine_noise`] with [`Combination::Dng`] whenever the scale
/// is finite. When the odds overflow, each element is formed in log space as
/// `u - sign(c - u) * exp(ln lambda0 + log_odds + ln|c - u|)`, so an element
/// whose difference rounds to zero stays at `u` instead of becoming NaN.
pub fn combine_dng_log_odds(
    eps_uncond: &[f64],
    eps_cond: &[f64],
    log_odds: f64,
    lambda0: f64,
) -> Result<Vec<f64>> {
    let lambda = dynamic_lambda_from_log_odds(log_odds, lambda0);
    if lambda.is_finite() {
        return combine_noise(eps_uncond, eps_cond, lambda, Combination::Dng);
    }
    check_len(eps_uncond.len(), eps_cond.len())?;
    let log_scale = lambda0.ln() + log_odds;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| {
            let d = c - u;
            if d == 0.0 {
                *u
            } else {
                u - d.signum() * (log_scale + d.abs().ln()).exp()
            }
        })
        .collect())
}

pub fn combine_noise(
    eps_uncond: &[f64],
    eps_cond: &[f64],
    lambda: f64,
    rule: Combination,
) -> Result<Vec<f64>> {
    check_len(eps_uncond.len(), eps_cond.len())?;
    // Affine form: lambda = 0 returns eps_uncond and CFG at lambda = 1 returns
    // eps_cond, both bit for bit.
    let w = match rule {
        Combination::Cfg => lambda,
        Combination::Np | Combination::Dng => -lambda,
    };
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| (1.0 - w) * u + w * c)
        .collect())
}

/// Negative combination with a separate scale per element.
pub fn combine_noise_elementwise(
    eps_uncond: &[f64],
    eps_cond: &[f64],
    scales: &[f64],
) -> Result<Vec<f64>> {
    check_len(eps_uncond.len(), eps_cond.len())?;
    check_len(eps_uncond.len(), scales.len())?;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .zip(scales)
        .map(|((u, c), s)| (1.0 + s) * u - s * c)
        .collect())
}

/// Mean of the Gaussian reverse transition at step `t` implied by noise prediction `eps`:
/// `(x_t - (1 - alpha_t) / sqrt(1 - ab_t) eps) / sqrt(alpha_t)`.
pub fn mean_from_noise(
    x_t: &[f64],
    eps: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Vec<f64>> {
    check_len(x_t.len(), eps.len())?;
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    Ok(x_t
        .iter()
        .zip(eps)
        .map(|(x, e)| (x - coef * e) * inv)
        .collect())
}

/// Tracked `log p(c-|x_t)` with its clamp bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorState {
    log_p: f64,
    p_min: f64,
    p_max: f64,
}

impl PosteriorState {
    pub fn new(prior: f64, p_min: f64, p_max: f64) -> Result<Self> {
        if !(p_min > 0.0 && p_min <= p_max && p_max < 1.0) {
            return Err(Error::InvalidGuidance("need 0 < p_min <= p_max < 1".into()));
        }
        if !(p_min..=p_max).contains(&prior) {
            return Err(Error::ProbabilityOutOfRange(prior));
        }
        Ok(Self {
            log_p: prior.ln(),
            p_min,
            p_max,
        })
    }

    pub fn from_config(cfg: &GuidanceConfig) -> Result<Self> {
        Self::new(cfg.prior, cfg.p_min, cfg.p_max)
    }

    pub fn log_p(&self) -> f64 {
        self.log_p
    }

    /// The posterior, always inside `[p_min, p_max]`.
    pub fn probability(&self) -> f64 {
        self.log_p.exp().clamp(self.p_min, self.p_max)
    }

    pub fn clamps(&self) -> (f64, f64) {
        (self.p_min, self.p_max)
    }

    /// One tracker step: compares the new state against the forbidden and the
    /// unconditional transition means (both predicted from the previous state).
    pub fn update(
        &self,
        x_new: &[f64],
        mu_uncond: &[f64],
        mu_forbidden: &[f64],
        sigma_sq: f64,
        tau: f64,
        delta: f64,
    ) -> Result<Self> {
        if !(sigma_sq > 0.0) {
            return Err(Error::NonPositiveVariance(sigma_sq));
        }
        check_len(x_new.len(), mu_uncond.len())?;
        check_len(x_new.len(), mu_forbidden.len())?;
        let dist_f: f64 = x_new
            .iter()
            .zip(mu_forbidden)
            .map(|(x, m)| (x - m) * (x - m))
            .sum();
        let dist_u: f64 = x_new
            .iter()
            .zip(mu_uncond)
            .map(|(x, m)| (x - m) * (x - m))
            .sum();
        let increment = (delta - tau * (dist_f - dist_u)) / (2.0 * sigma_sq);
        let log_p = (self.log_p + increment).clamp(self.p_min.ln(), self.p_max.ln());
        Ok(Self { log_p, ..*self })
    }
}

/// Free-function form of [`PosteriorState::update`].
pub fn update_posterior(
    state: &PosteriorState,
    x_new: &[f64],
    mu_uncond: &[f64],
    mu_forbidden: &[f64],
    sigma_sq: f64,
    tau: f64,
    delta: f64,
) -> Result<PosteriorState> {
    state.update(x_new, mu_uncond, mu_forbidden, sigma_sq, tau, delta)
}

/// Per-chain state of the thresholded baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SldState {
    pub momentum: Vec<f64>,
    pub steps_seen: usize,
}

impl SldState {
    pub fn new(dim: usize) -> Self {
        Self {
            momentum: vec![0.0; dim],
            steps_seen: 0,
        }
    }
}

/// Elementwise guidance scales for the thresholded baseline.
///
/// Element `k` gets `lambda0 * min(1, scale * |d_k|)` when the signed
/// difference `d_k = eps_u_k - eps_neg_k` is below the threshold, else 0. The
/// momentum is an exponential moving average of these raw scales and is added
/// with weight `momentum_scale`. During the first `warmup_steps` calls the
/// momentum still accumulates but the returned scales are zero.
pub fn sld_lambda(
    eps_uncond: &[f64],
    eps_neg: &[f64],
    cfg: &SldConfig,
    lambda0: f64,
    state: &SldState,
) -> Result<(Vec<f64>, SldState)> {
    check_len(eps_uncond.len(), eps_neg.len())?;
    check_len(eps_uncond.len(), state.momentum.len())?;
    let raw: Vec<f64> = eps_uncond
        .iter()
        .zip(eps_neg)
        .map(|(u, n)| {
            let diff = u - n;
            if diff < cfg.threshold {
                lambda0 * (cfg.scale * diff.abs()).min(1.0)
            } else {
                0.0
            }
        })
        .collect();
    let momentum: Vec<f64> = state
        .momentum
        .iter()
        .zip(&raw)
        .map(|(m, r)| cfg.momentum_beta * m + (1.0 - cfg.momentum_beta) * r)
        .collect();
    let scales = if state.steps_seen < cfg.warmup_steps {
        vec![0.0; raw.len()]
    } else {
        raw.iter()
            .zip(&momentum)
            .map(|(r, m)| r + cfg.momentum_scale * m)
            .collect()
    };
    Ok((
        scales,
        SldState {
            momentum,
            steps_seen: state.steps_seen + 1,
        },
    ))
}
