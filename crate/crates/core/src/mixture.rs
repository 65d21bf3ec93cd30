//! Closed-form isotropic Gaussian mixtures.
//!
//! A mixture `sum_i c_i N(mu_i, s_i^2 I)` pushed through the variance-preserving
//! forward process stays a mixture: mode `i` moves to `sqrt(ab) mu_i` with
//! variance `1 - ab + ab s_i^2`. Densities, scores and class posteriors are all
//! available in closed form, which makes this module the reference every
//! sampler-level quantity is checked against.
//!
//! All probability arithmetic is done in log-space.

use crate::error::{check_len, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Variance substituted for delta peaks when classifying samples.
pub const CLASSIFY_VARIANCE_FLOOR: f64 = 1e-6;

/// Mixture of isotropic Gaussians in `dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GaussianMixture {
    /// Validates and builds a mixture. Weights must sum to one within 1e-12.
    /// Zero variances (delta peaks) are accepted.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::InvalidMixture(
                "mixture needs at least one mode".into(),
            ));
        }
        if means.len() != n || variances.len() != n {
            return Err(Error::InvalidMixture(format!(
                "{} weights, {} means and {} variances",
                n,
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        if let Some(i) = means.iter().position(|m| m.len() != dim) {
            return Err(Error::InvalidMixture(format!(
                "mean {i} has length {}, expected {dim}",
                means[i].len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMixture(format!(
                "weight {i} = {} is not a probability",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, not 1"
            )));
        }
        if let Some(i) = variances.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidMixture(format!(
                "variance {i} = {} is negative or non-finite",
                variances[i]
            )));
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::InvalidMixture("means must be finite".into()));
        }
        Ok(Self {
            dim,
            weights,
            means,
            variances,
        })
    }

    /// Builds a mixture from unnormalized non-negative weights.
    pub fn from_unnormalized(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    ) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Self::new(weights, means, variances)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_modes(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// The mixture after forward diffusion to cumulative signal level `alpha_bar`.
    pub fn diffuse(&self, alpha_bar: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_bar) {
            return Err(Error::InvalidMixture(format!(
                "alpha_bar = {alpha_bar} outside [0, 1]"
            )));
        }
        let scale = alpha_bar.sqrt();
        let means = self
            .means
            .iter()
            .map(|m| m.iter().map(|v| scale * v).collect())
            .collect();
        let variances = self
            .variances
            .iter()
            .map(|v| 1.0 - alpha_bar + alpha_bar * v)
            .collect();
        Ok(Self {
            dim: self.dim,
            weights: self.weights.clone(),
            means,
            variances,
        })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_len(self.dim, x.len())?;
        match self.variances.iter().position(|v| *v <= 0.0) {
            Some(mode) => Err(Error::DegenerateMixture { mode }),
            None => Ok(()),
        }
    }

    /// Per-mode joint log terms `log c_i + log N(x; mu_i, s_i^2 I)`.
    /// Zero-weight modes yield `-inf`.
    fn log_terms(&self, x: &[f64], variances: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(variances)
            .map(|((&w, mean), &var)| {
                let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * (d * (LN_2PI + var.ln()) + sq / var)
            })
            .collect()
    }

    /// `log p(x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(log_sum_exp(&self.log_terms(x, &self.variances)))
    }

    /// Posterior mode responsibilities `r_i(x)`, summing to one.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let terms = self.log_terms(x, &self.variances);
        let lse = log_sum_exp(&terms);
        Ok(terms.into_iter().map(|l| (l - lse).exp()).collect())
    }

    /// `grad_x log p(x) = sum_i r_i(x) (mu_i - x) / s_i^2`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let resp = self.responsibilities(x)?;
        let mut out = vec![0.0; self.dim];
        for ((r, mean), var) in resp.iter().zip(&self.means).zip(&self.variances) {
            if *r == 0.0 {
                continue;
            }
            let coef = r / var;
            for ((o, m), xi) in out.iter_mut().zip(mean).zip(x) {
                *o += coef * (m - xi);
            }
        }
        Ok(out)
    }

    /// Most probable mode for `x`, ties going to the lowest index. Zero
    /// variances are floored at [`CLASSIFY_VARIANCE_FLOOR`].
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        check_len(self.dim, x.len())?;
        let floored: Vec<f64> = self
            .variances
            .iter()
            .map(|v| v.max(CLASSIFY_VARIANCE_FLOOR))
            .collect();
        let terms = self.log_terms(x, &floored);
        let mut best = 0;
        for (i, t) in terms.iter().enumerate().skip(1) {
            if *t > terms[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Free-function form of [`GaussianMixture::diffuse`].
pub fn diffuse_mixture(gmm: &GaussianMixture, alpha_bar: f64) -> Result<GaussianMixture> {
    gmm.diffuse(alpha_bar)
}

pub fn log_density(gmm: &GaussianMixture, x: &[f64]) -> Result<f64> {
    gmm.log_density(x)
}

pub fn score(gmm: &GaussianMixture, x: &[f64]) -> Result<Vec<f64>> {
    gmm.score(x)
}

pub fn classify_mode(gmm: &GaussianMixture, x: &[f64]) -> Result<usize> {
    gmm.classify(x)
}

/// `log sum_i exp(v_i)`, stable for any finite inputs; `-inf` if all are `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_alpha_bar_noisy(alpha_bar: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha_bar) {
        return Err(Error::ZeroNoiseLevel(alpha_bar));
    }
    Ok((1.0 - alpha_bar).sqrt())
}

/// `eps = -sqrt(1 - ab) * s`.
pub fn noise_from_score(score: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    let sigma = check_alpha_bar_noisy(alpha_bar)?;
    Ok(score.iter().map(|s| -sigma * s).collect())
}

/// Inverse of [`noise_from_score`].
pub fn score_from_noise(noise: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    let sigma = check_alpha_bar_noisy(alpha_bar)?;
    Ok(noise.iter().map(|e| -e / sigma).collect())
}

/// An unconditional mixture partitioned into forbidden and allowed modes.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSplit {
    full: GaussianMixture,
    forbidden_indices: Vec<usize>,
    forbidden: GaussianMixture,
    allowed: GaussianMixture,
    prior: f64,
}

impl MixtureSplit {
    /// `forbidden_indices` are deduplicated and sorted. Both sides must carry
    /// positive mass so the prior lies strictly inside (0, 1).
    pub fn new(full: GaussianMixture, forbidden_indices: &[usize]) -> Result<Self> {
        let n = full.n_modes();
        let mut idx = forbidden_indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if let Some(bad) = idx.iter().find(|i| **i >= n) {
            return Err(Error::InvalidMixture(format!(
                "forbidden index {bad} out of range for {n} modes"
            )));
        }
        let is_forbidden = |i: usize| idx.binary_search(&i).is_ok();
        let pick = |keep: &dyn Fn(usize) -> bool| -> Result<(GaussianMixture, f64)> {
            let sel: Vec<usize> = (0..n).filter(|i| keep(*i)).collect();
            let mass: f64 = sel.iter().map(|i| full.weights[*i]).sum();
            if sel.is_empty() || mass <= 0.0 {
                return Err(Error::InvalidMixture(
                    "forbidden and allowed parts must both carry positive weight".into(),
                ));
            }
            let gmm = GaussianMixture::from_unnormalized(
                sel.iter().map(|i| full.weights[*i]).collect(),
                sel.iter().map(|i| full.means[*i].clone()).collect(),
                sel.iter().map(|i| full.variances[*i]).collect(),
            )?;
            Ok((gmm, mass))
        };
        let (forbidden, prior) = pick(&is_forbidden)?;
        let (allowed, _) = pick(&|i| !is_forbidden(i))?;
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::InvalidMixture(format!(
                "prior {prior} not in (0, 1)"
            )));
        }
        Ok(Self {
            full,
            forbidden_indices: idx,
            forbidden,
            allowed,
            prior,
        })
    }

    /// The same mixture with forbidden and allowed roles swapped.
    pub fn complement(&self) -> Result<Self> {
        let idx: Vec<usize> = (0..self.full.n_modes())
            .filter(|i| !self.is_forbidden(*i))
            .collect();
        Self::new(self.full.clone(), &idx)
    }

    pub fn full(&self) -> &GaussianMixture {
        &self.full
    }

    pub fn forbidden(&self) -> &GaussianMixture {
        &self.forbidden
    }

    pub fn allowed(&self) -> &GaussianMixture {
        &self.allowed
    }

    pub fn forbidden_indices(&self) -> &[usize] {
        &self.forbidden_indices
    }

    pub fn is_forbidden(&self, mode: usize) -> bool {
        self.forbidden_indices.binary_search(&mode).is_ok()
    }

    /// `p(c-)`: total weight of the forbidden modes.
    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn dim(&self) -> usize {
        self.full.dim
    }
}

/// `log p(c-|x)` from already diffused forbidden and full mixtures.
pub fn log_posterior_diffused(
    prior: f64,
    forbidden_t: &GaussianMixture,
    full_t: &GaussianMixture,
    x: &[f64],
) -> Result<f64> {
    if prior == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(prior.ln() + forbidden_t.log_density(x)? - full_t.log_density(x)?)
}

/// `p(c-|x)` by Bayes' rule, clamped to [0, 1] to absorb rounding.
pub fn posterior_diffused(
    prior: f64,
    forbidden_t: &GaussianMixture,
    full_t: &GaussianMixture,
    x: &[f64],
) -> Result<f64> {
    Ok(log_posterior_diffused(prior, forbidden_t, full_t, x)?
        .exp()
        .clamp(0.0, 1.0))
}

/// Posterior odds `p(c-|x) / (1 - p(c-|x))` in log-space, computed as
/// `log(prior p_f(x)) - log((1 - prior) p_r(x))` so it stays finite where the
/// posterior itself rounds to one.
pub fn log_odds_diffused(
    prior: f64,
    forbidden_t: &GaussianMixture,
    allowed_t: &GaussianMixture,
    x: &[f64],
) -> Result<f64> {
    Ok(prior.ln() + forbidden_t.log_density(x)? - (1.0 - prior).ln() - allowed_t.log_density(x)?)
}

/// Exact class posterior `p(c-|x)` at signal level `alpha_bar`.
pub fn exact_posterior(split: &MixtureSplit, x: &[f64], alpha_bar: f64) -> Result<f64> {
    posterior_diffused(
        split.prior,
        &split.forbidden.diffuse(alpha_bar)?,
        &split.full.diffuse(alpha_bar)?,
        x,
    )
}

/// Exact posterior log-odds at signal level `alpha_bar`.
pub fn exact_log_odds(split: &MixtureSplit, x: &[f64], alpha_bar: f64) -> Result<f64> {
    log_odds_diffused(
        split.prior,
        &split.forbidden.diffuse(alpha_bar)?,
        &split.allowed.diffuse(alpha_bar)?,
        x,
    )
}
