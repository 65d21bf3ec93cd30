//! Reverse DDPM chains with CFG, NP, DNG and SLD guidance.
//!
//! One chain follows this order at every step `t = T, ..., 1`:
//!
//! 1. evaluate the unconditional and conditional noise predictions at `x_t`;
//! 2. form the guidance scale from the posterior currently held (for the
//!    tracker this is the estimate for `x_t`, built from transitions that ended
//!    at `x_t`);
//! 3. take the DDPM step to `x_{t-1}`;
//! 4. update the tracker with `x_{t-1}` against the two transition means
//!    predicted from `x_t`.
//!
//! The scale used at step `t` therefore never depends on `x_{t-1}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::guidance::{
    combine_dng_log_odds, combine_noise, combine_noise_elementwise, dynamic_lambda,
    dynamic_lambda_from_log_odds, mean_from_noise, sld_lambda, Combination, GuidanceConfig,
    PosteriorState, Scheme, SldState,
};
use crate::mixture::{log_odds_diffused, posterior_diffused, GaussianMixture, MixtureSplit};
use crate::schedule::NoiseSchedule;

/// A noise-prediction model `eps(x, t)`.
pub trait ScoreProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn noise(&self, x: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// Exact noise predictions of a Gaussian mixture diffused along a schedule.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    // index t - 1 holds the mixture at step t
    diffused: Vec<GaussianMixture>,
    noise_scales: Vec<f64>,
}

impl AnalyticScore {
    pub fn new(mixture: &GaussianMixture, schedule: &NoiseSchedule) -> Result<Self> {
        let diffused = schedule
            .alpha_bars()
            .iter()
            .map(|ab| mixture.diffuse(*ab))
            .collect::<Result<Vec<_>>>()?;
        let noise_scales = schedule
            .alpha_bars()
            .iter()
            .map(|ab| (1.0 - ab).sqrt())
            .collect();
        Ok(Self {
            diffused,
            noise_scales,
        })
    }

    /// The mixture at step `t` (`1..=T`).
    pub fn mixture_at(&self, t: usize) -> Result<&GaussianMixture> {
        t.checked_sub(1)
            .and_then(|i| self.diffused.get(i))
            .ok_or(Error::StepOutOfRange {
                t,
                steps: self.diffused.len(),
            })
    }
}

impl ScoreProvider for AnalyticScore {
    fn dim(&self) -> usize {
        self.diffused[0].dim()
    }

    fn noise(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let gmm = self.mixture_at(t)?;
        let scale = self.noise_scales[t - 1];
        let mut s = gmm.score(x)?;
        s.iter_mut().for_each(|v| *v *= -scale);
        Ok(s)
    }
}

/// `x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - ab_t) eps) / sqrt(alpha_t) + sqrt(beta_t) z`.
pub fn ddpm_step(
    x_t: &[f64],
    eps_guided: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_len(x_t.len(), z.len())?;
    let mean = mean_from_noise(x_t, eps_guided, schedule, t)?;
    let sd = schedule.beta(t)?.sqrt();
    Ok(mean.iter().zip(z).map(|(m, z)| m + sd * z).collect())
}

/// Everything needed to run a batch of reverse chains.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub split: MixtureSplit,
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceConfig,
    pub n_samples: usize,
    pub seed: u64,
    pub record_trajectories: bool,
    /// Also keep both noise predictions in the trace.
    pub record_noise: bool,
}

impl RunConfig {
    pub fn new(
        split: MixtureSplit,
        schedule: NoiseSchedule,
        guidance: GuidanceConfig,
        n_samples: usize,
        seed: u64,
    ) -> Self {
        Self {
            split,
            schedule,
            guidance,
            n_samples,
            seed,
            record_trajectories: false,
            record_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidRun("n_samples must be at least 1".into()));
        }
        self.guidance.validate()
    }
}

/// Per-step traces of one chain. Rows are stored in loop order: row `k`
/// belongs to step `t = T - k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub dim: usize,
    pub steps: usize,
    /// `T + 1` states `x_T, ..., x_0`, flattened.
    pub states: Vec<f64>,
    /// Applied guidance scale per step; one value, or `dim` values for SLD.
    pub lambdas: Vec<f64>,
    pub lambda_width: usize,
    /// Posterior used to form the scale at each step (DNG schemes only).
    pub posteriors: Option<Vec<f64>>,
    pub noise_uncond: Option<Vec<f64>>,
    pub noise_cond: Option<Vec<f64>>,
}

impl Trace {
    fn row(&self, t: usize) -> usize {
        self.steps - t
    }

    /// `x_t` for `t` in `0..=T`.
    pub fn state(&self, t: usize) -> &[f64] {
        let r = self.row(t);
        &self.states[r * self.dim..(r + 1) * self.dim]
    }

    /// Scale applied at step `t` in `1..=T`.
    pub fn lambda(&self, t: usize) -> &[f64] {
        let r = self.row(t);
        &self.lambdas[r * self.lambda_width..(r + 1) * self.lambda_width]
    }

    pub fn posterior(&self, t: usize) -> Option<f64> {
        self.posteriors.as_ref().map(|p| p[self.row(t)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub chain: usize,
    pub seed: u64,
    pub final_sample: Vec<f64>,
    pub trace: Option<Trace>,
    /// Smallest and largest posterior the chain used, for DNG schemes.
    pub posterior_range: Option<(f64, f64)>,
}

/// Deterministic random stream for chain `chain` of a batch seeded with `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Reusable sampler: precomputes the diffused mixtures of a [`RunConfig`].
pub struct Sampler<'a> {
    config: &'a RunConfig,
    full: AnalyticScore,
    forbidden: AnalyticScore,
    allowed: AnalyticScore,
}

impl<'a> Sampler<'a> {
    pub fn new(config: &'a RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            full: AnalyticScore::new(config.split.full(), &config.schedule)?,
            forbidden: AnalyticScore::new(config.split.forbidden(), &config.schedule)?,
            allowed: AnalyticScore::new(config.split.allowed(), &config.schedule)?,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        self.config
    }

    pub fn run_chain(&self, chain: usize) -> Result<TrajectoryRecord> {
        let cfg = self.config;
        let g = &cfg.guidance;
        let schedule = &cfg.schedule;
        let steps = schedule.steps();
        let dim = cfg.split.dim();
        let scheme = g.scheme;
        let record = cfg.record_trajectories;
        let lambda_width = if scheme == Scheme::Sld { dim } else { 1 };

        let mut rng = chain_rng(cfg.seed, chain);
        let mut x = standard_normal(&mut rng, dim);

        let mut tracker = PosteriorState::from_config(g)?;
        let mut sld = SldState::new(dim);
        let mut range: Option<(f64, f64)> = None;

        let mut states = Vec::new();
        let mut lambdas = Vec::new();
        let mut posteriors = Vec::new();
        let mut noise_u = Vec::new();
        let mut noise_c = Vec::new();
        if record {
            states.reserve((steps + 1) * dim);
            states.extend_from_slice(&x);
            lambdas.reserve(steps * lambda_width);
        }

        for t in (1..=steps).rev() {
            let step = |e: Error| e.at_step(t);
            let eps_u = self.full.noise(&x, t).map_err(step)?;
            let eps_c = match scheme {
                Scheme::None => None,
                Scheme::Cfg => Some(self.allowed.noise(&x, t).map_err(step)?),
                _ => Some(self.forbidden.noise(&x, t).map_err(step)?),
            };

            let mut posterior = None;
            let (eps_g, scale) = match (scheme, eps_c.as_deref()) {
                (Scheme::Cfg, Some(c)) => (
                    combine_noise(&eps_u, c, g.lambda0, Combination::Cfg).map_err(step)?,
                    vec![g.lambda0],
                ),
                (Scheme::Np, Some(c)) => (
                    combine_noise(&eps_u, c, g.lambda0, Combination::Np).map_err(step)?,
                    vec![g.lambda0],
                ),
                (Scheme::DngExact, Some(c)) => {
                    let forbidden_t = self.forbidden.mixture_at(t)?;
                    let log_odds = log_odds_diffused(
                        cfg.split.prior(),
                        forbidden_t,
                        self.allowed.mixture_at(t)?,
                        &x,
                    )
                    .map_err(step)?;
                    posterior = Some(
                        posterior_diffused(
                            cfg.split.prior(),
                            forbidden_t,
                            self.full.mixture_at(t)?,
                            &x,
                        )
                        .map_err(step)?,
                    );
                    let lam = dynamic_lambda_from_log_odds(log_odds, g.lambda0);
                    (
                        combine_dng_log_odds(&eps_u, c, log_odds, g.lambda0).map_err(step)?,
                        vec![lam],
                    )
                }
                (Scheme::DngTracked, Some(c)) => {
                    let p = tracker.probability();
                    posterior = Some(p);
                    let lam = dynamic_lambda(p, g.lambda0).map_err(step)?;
                    (
                        combine_noise(&eps_u, c, lam, Combination::Dng).map_err(step)?,
                        vec![lam],
                    )
                }
                (Scheme::Sld, Some(c)) => {
                    let sld_cfg = g
                        .sld
                        .as_ref()
                        .expect("validated: sld scheme carries sld config");
                    let (scales, next) =
                        sld_lambda(&eps_u, c, sld_cfg, g.lambda0, &sld).map_err(step)?;
                    sld = next;
                    (
                        combine_noise_elementwise(&eps_u, c, &scales).map_err(step)?,
                        scales,
                    )
                }
                _ => (eps_u.clone(), vec![0.0]),
            };

            // No noise is injected into the final step.
            let z = if t > 1 {
                standard_normal(&mut rng, dim)
            } else {
                vec![0.0; dim]
            };
            let x_prev = ddpm_step(&x, &eps_g, schedule, t, &z).map_err(step)?;

            if scheme == Scheme::DngTracked {
                let c = eps_c
                    .as_deref()
                    .expect("dng carries a conditional prediction");
                let mu_u = mean_from_noise(&x, &eps_u, schedule, t).map_err(step)?;
                let mu_f = mean_from_noise(&x, c, schedule, t).map_err(step)?;
                tracker = tracker
                    .update(&x_prev, &mu_u, &mu_f, schedule.sigma_sq(t)?, g.tau, g.delta)
                    .map_err(step)?;
            }

            if let Some(p) = posterior {
                range = Some(match range {
                    None => (p, p),
                    Some((lo, hi)) => (lo.min(p), hi.max(p)),
                });
            }
            if record {
                states.extend_from_slice(&x_prev);
                lambdas.extend_from_slice(&scale);
                if let Some(p) = posterior {
                    posteriors.push(p);
                }
                if cfg.record_noise {
                    noise_u.extend_from_slice(&eps_u);
                    noise_c.extend(eps_c.unwrap_or_else(|| vec![0.0; dim]));
                }
            }
            x = x_prev;
        }

        let trace = record.then(|| Trace {
            dim,
            steps,
            states,
            lambdas,
            lambda_width,
            posteriors: scheme.is_dng().then_some(posteriors),
            noise_uncond: cfg.record_noise.then_some(noise_u),
            noise_cond: cfg.record_noise.then_some(noise_c),
        });
        Ok(TrajectoryRecord {
            chain,
            seed: cfg.seed,
            final_sample: x,
            trace,
            posterior_range: range,
        })
    }

    /// Chains `0..n_samples`, in chain order, computed in parallel.
    pub fn run_batch(&self) -> Result<Vec<TrajectoryRecord>> {
        (0..self.config.n_samples)
            .into_par_iter()
            .map(|i| self.run_chain(i))
            .collect()
    }
}

/// Runs chain `chain` of `config`.
pub fn run_chain(config: &RunConfig, chain: usize) -> Result<TrajectoryRecord> {
    Sampler::new(config)?.run_chain(chain)
}

/// Runs every chain of `config`; the result does not depend on thread count.
pub fn run_batch(config: &RunConfig) -> Result<Vec<TrajectoryRecord>> {
    Sampler::new(config)?.run_batch()
}

/// Final samples of a batch.
pub fn final_samples(records: &[TrajectoryRecord]) -> Vec<Vec<f64>> {
    records.iter().map(|r| r.final_sample.clone()).collect()
}
