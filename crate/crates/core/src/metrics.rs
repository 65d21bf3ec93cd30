//! Evaluation quantities over sampled batches and analytic fields.

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::guidance::{combine_dng_log_odds, Scheme};
use crate::mixture::{log_odds_diffused, posterior_diffused, GaussianMixture, MixtureSplit};
use crate::sampler::TrajectoryRecord;
use crate::schedule::NoiseSchedule;

/// Per-mode counts of classified samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    pub counts: Vec<usize>,
    pub total: usize,
    pub forbidden_indices: Vec<usize>,
}

impl ClassHistogram {
    /// Classifies every sample against the clean full mixture of `split`.
    pub fn from_samples(samples: &[Vec<f64>], split: &MixtureSplit) -> Result<Self> {
        let full = split.full();
        let mut counts = vec![0; full.n_modes()];
        for s in samples {
            counts[full.classify(s)?] += 1;
        }
        Ok(Self {
            counts,
            total: samples.len(),
            forbidden_indices: split.forbidden_indices().to_vec(),
        })
    }

    pub fn forbidden_count(&self) -> usize {
        self.forbidden_indices.iter().map(|i| self.counts[*i]).sum()
    }

    pub fn forbidden_fraction(&self) -> f64 {
        self.forbidden_count() as f64 / self.total as f64
    }

    fn allowed_counts(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.forbidden_indices.contains(i))
            .map(|(_, c)| *c)
            .collect()
    }
}

/// Fraction of samples not classified into a forbidden mode.
pub fn safety(samples: &[Vec<f64>], split: &MixtureSplit) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("safety of an empty batch".into()));
    }
    Ok(1.0 - ClassHistogram::from_samples(samples, split)?.forbidden_fraction())
}

/// KL divergence of the allowed-mode histogram from the uniform distribution
/// over allowed modes. Forbidden counts are dropped before renormalizing.
pub fn kl_to_ideal(hist: &ClassHistogram) -> Result<f64> {
    let allowed = hist.allowed_counts();
    let n: usize = allowed.iter().sum();
    if n == 0 {
        return Err(Error::Metric("no samples in allowed modes".into()));
    }
    let k = allowed.len() as f64;
    let kl = allowed
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let q = *c as f64 / n as f64;
            q * (q * k).ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Mean tracked and exact posterior per step for one group of chains.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCurve {
    pub chains: usize,
    /// Indexed like [`TrackingReport::steps`]; empty when the group is empty.
    pub tracked: Vec<f64>,
    pub exact: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    /// Steps `T, T-1, ..., 1`.
    pub steps: Vec<usize>,
    /// Chains whose final sample falls in a forbidden mode.
    pub forbidden: GroupCurve,
    pub allowed: GroupCurve,
    /// Mean over steps and non-empty groups of `|tracked - exact|`.
    pub mae: f64,
}

/// Compares tracked posteriors against the closed-form posterior at each
/// recorded state, with chains grouped by the class of their final sample.
pub fn posterior_tracking_error(
    records: &[TrajectoryRecord],
    split: &MixtureSplit,
    schedule: &NoiseSchedule,
) -> Result<TrackingReport> {
    let steps = schedule.steps();
    let mut groups: [Vec<&crate::sampler::Trace>; 2] = [Vec::new(), Vec::new()];
    for r in records {
        let trace = r
            .trace
            .as_ref()
            .filter(|t| t.posteriors.is_some())
            .ok_or_else(|| Error::Metric(format!("chain {} has no posterior trace", r.chain)))?;
        if trace.steps != steps {
            return Err(Error::Metric(format!(
                "chain {} has {} steps, schedule has {steps}",
                r.chain, trace.steps
            )));
        }
        let forbidden = split.is_forbidden(split.full().classify(&r.final_sample)?);
        groups[usize::from(!forbidden)].push(trace);
    }

    let diffused: Vec<(GaussianMixture, GaussianMixture)> = (1..=steps)
        .map(|t| {
            let ab = schedule.alpha_bar(t)?;
            Ok((split.forbidden().diffuse(ab)?, split.full().diffuse(ab)?))
        })
        .collect::<Result<_>>()?;

    let curve = |members: &[&crate::sampler::Trace]| -> Result<GroupCurve> {
        if members.is_empty() {
            return Ok(GroupCurve {
                chains: 0,
                tracked: Vec::new(),
                exact: Vec::new(),
            });
        }
        let n = members.len() as f64;
        let per_step: Vec<(f64, f64)> = (1..=steps)
            .rev()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|t| {
                let (forbidden_t, full_t) = &diffused[t - 1];
                let mut tracked = 0.0;
                let mut exact = 0.0;
                for tr in members {
                    tracked += tr.posterior(t).expect("checked above");
                    exact += posterior_diffused(split.prior(), forbidden_t, full_t, tr.state(t))?;
                }
                Ok((tracked / n, exact / n))
            })
            .collect::<Result<_>>()?;
        Ok(GroupCurve {
            chains: members.len(),
            tracked: per_step.iter().map(|p| p.0).collect(),
            exact: per_step.iter().map(|p| p.1).collect(),
        })
    };
    let forbidden = curve(&groups[0])?;
    let allowed = curve(&groups[1])?;

    let errors: Vec<f64> = [&forbidden, &allowed]
        .iter()
        .flat_map(|g| g.tracked.iter().zip(&g.exact).map(|(a, b)| (a - b).abs()))
        .collect();
    if errors.is_empty() {
        return Err(Error::Metric("no chains to compare".into()));
    }
    Ok(TrackingReport {
        steps: (1..=steps).rev().collect(),
        forbidden,
        allowed,
        mae: errors.iter().sum::<f64>() / errors.len() as f64,
    })
}

/// Target mass below which a bin is floored when computing KL.
pub const TARGET_MASS_FLOOR: f64 = 1e-12;

/// Binned sample density compared against an analytic 1D mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram1d {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Samples outside the binned range. They are clipped into the end bins
    /// so that no mass escapes the KL.
    pub outside: usize,
    /// Empirical density, integrating to one over the range.
    pub density: Vec<f64>,
    /// Target probability mass per bin, renormalized over the range.
    pub target_mass: Vec<f64>,
    /// `KL(empirical || target)` over bins, with target mass floored at
    /// [`TARGET_MASS_FLOOR`].
    pub kl: f64,
}

/// Composite Simpson quadrature of the target density over one bin.
fn bin_mass(target: &GaussianMixture, lo: f64, hi: f64) -> Result<f64> {
    const PANELS: usize = 16;
    let h = (hi - lo) / PANELS as f64;
    let mut acc = 0.0;
    for k in 0..=PANELS {
        let w = if k == 0 || k == PANELS {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * target.log_density(&[lo + k as f64 * h])?.exp();
    }
    Ok(acc * h / 3.0)
}

pub fn histogram_1d(
    samples: &[f64],
    target: &GaussianMixture,
    range: (f64, f64),
    bins: usize,
) -> Result<Histogram1d> {
    check_len(1, target.dim())?;
    let (lo, hi) = range;
    if !(lo < hi) || bins == 0 {
        return Err(Error::Metric(format!(
            "bad histogram range [{lo}, {hi}] with {bins} bins"
        )));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    let mut outside = 0;
    for &s in samples {
        if s.is_nan() {
            return Err(Error::Metric("NaN sample".into()));
        }
        if s < lo || s > hi {
            outside += 1;
        }
        let k = ((s - lo) / width).floor().clamp(0.0, (bins - 1) as f64);
        counts[k as usize] += 1;
    }
    let inside = samples.len();
    if inside == 0 {
        return Err(Error::Metric("no samples to bin".into()));
    }
    let mass: Vec<f64> = edges
        .windows(2)
        .map(|e| bin_mass(target, e[0], e[1]))
        .collect::<Result<_>>()?;
    let total_mass: f64 = mass.iter().sum();
    let target_mass: Vec<f64> = mass.iter().map(|m| m / total_mass).collect();
    let kl = counts
        .iter()
        .zip(&target_mass)
        .filter(|(c, _)| **c > 0)
        .map(|(c, p)| {
            let q = *c as f64 / inside as f64;
            q * (q / p.max(TARGET_MASS_FLOOR)).ln()
        })
        .sum();
    Ok(Histogram1d {
        density: counts
            .iter()
            .map(|c| *c as f64 / (inside as f64 * width))
            .collect(),
        edges,
        counts,
        outside,
        target_mass,
        kl,
    })
}

/// Rectangular 2D evaluation grid, `nx * ny` points, x varying fastest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    fn axis(range: (f64, f64), n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![range.0];
        }
        (0..n)
            .map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let xs = Self::axis(self.x_range, self.nx);
        let ys = Self::axis(self.y_range, self.ny);
        ys.iter()
            .flat_map(|y| xs.iter().map(move |x| [*x, *y]))
            .collect()
    }
}

/// Score-field components of one guidance scheme on a 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub spec: GridSpec,
    pub t: usize,
    pub scheme: Scheme,
    pub points: Vec<[f64; 2]>,
    pub unconditional: Vec<[f64; 2]>,
    pub guidance: Vec<[f64; 2]>,
    pub total: Vec<[f64; 2]>,
}

/// Unconditional score and guidance term of `scheme` at a single point, in
/// score space. CFG guides toward the allowed mixture; NP and DNG away from
/// the forbidden one, DNG scaled by the exact posterior odds.
pub fn guided_score_components(
    split: &MixtureSplit,
    alpha_bar: f64,
    scheme: Scheme,
    lambda0: f64,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let full_t = split.full().diffuse(alpha_bar)?;
    let s = full_t.score(x)?;
    let term: Vec<f64> = match scheme {
        Scheme::None => vec![0.0; x.len()],
        Scheme::Cfg => {
            let sr = split.allowed().diffuse(alpha_bar)?.score(x)?;
            sr.iter().zip(&s).map(|(r, u)| lambda0 * (r - u)).collect()
        }
        Scheme::Np => {
            let sf = split.forbidden().diffuse(alpha_bar)?.score(x)?;
            sf.iter().zip(&s).map(|(f, u)| -lambda0 * (f - u)).collect()
        }
        Scheme::DngExact => {
            let forbidden_t = split.forbidden().diffuse(alpha_bar)?;
            let log_odds = log_odds_diffused(
                split.prior(),
                &forbidden_t,
                &split.allowed().diffuse(alpha_bar)?,
                x,
            )?;
            let sf = forbidden_t.score(x)?;
            let odds = log_odds.exp();
            if odds.is_finite() {
                sf.iter()
                    .zip(&s)
                    .map(|(f, u)| -lambda0 * odds * (f - u))
                    .collect()
            } else {
                let total = combine_dng_log_odds(&s, &sf, log_odds, lambda0)?;
                total.iter().zip(&s).map(|(t, u)| t - u).collect()
            }
        }
        other => {
            return Err(Error::InvalidGuidance(format!(
                "no closed-form field for scheme {other}"
            )))
        }
    };
    Ok((s, term))
}

/// Magnitude `lambda0 * odds * (|s_f| + |s|)` of the terms cancelled when the
/// DNG field is formed from black-box scores. Where the forbidden posterior is
/// close to one the f64 rounding error of that field is about `1e-16` times
/// this, which can exceed the field itself.
pub fn dng_cancellation_scale(
    split: &MixtureSplit,
    alpha_bar: f64,
    lambda0: f64,
    x: &[f64],
) -> Result<f64> {
    let forbidden_t = split.forbidden().diffuse(alpha_bar)?;
    let allowed_t = split.allowed().diffuse(alpha_bar)?;
    let odds = log_odds_diffused(split.prior(), &forbidden_t, &allowed_t, x)?.exp();
    let norm = |v: Vec<f64>| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let sf = norm(forbidden_t.score(x)?);
    let s = norm(split.full().diffuse(alpha_bar)?.score(x)?);
    Ok(lambda0.abs() * odds * (sf + s))
}

pub fn field_grid(
    split: &MixtureSplit,
    schedule: &NoiseSchedule,
    t: usize,
    scheme: Scheme,
    lambda0: f64,
    spec: GridSpec,
) -> Result<FieldGrid> {
    if split.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: split.dim(),
        });
    }
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t)?;
    let points = spec.points();
    let mut unconditional = Vec::with_capacity(points.len());
    let mut guidance = Vec::with_capacity(points.len());
    let mut total = Vec::with_capacity(points.len());
    for p in &points {
        let (s, g) = guided_score_components(split, ab, scheme, lambda0, p)?;
        unconditional.push([s[0], s[1]]);
        guidance.push([g[0], g[1]]);
        total.push([s[0] + g[0], s[1] + g[1]]);
    }
    Ok(FieldGrid {
        spec,
        t,
        scheme,
        points,
        unconditional,
        guidance,
        total,
    })
}
