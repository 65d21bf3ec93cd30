#![allow(dead_code)]

use negguide::GaussianMixture;
use statrs::distribution::{ContinuousCDF, Normal};

/// Asymptotic Kolmogorov tail `P(K > lambda)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// p-value from the KS statistic `d` and effective sample size `n`
/// (Stephens' small-sample correction).
fn ks_p_value(d: f64, n: f64) -> f64 {
    let sq = n.sqrt();
    kolmogorov_tail((sq + 0.12 + 0.11 / sq) * d)
}

/// One-sample KS test of `samples` against a 1D mixture CDF. Returns (D, p).
pub fn ks_one_sample(samples: &[f64], gmm: &GaussianMixture) -> (f64, f64) {
    let comps: Vec<(f64, Normal)> = gmm
        .weights()
        .iter()
        .zip(gmm.means())
        .zip(gmm.variances())
        .map(|((w, m), v)| (*w, Normal::new(m[0], v.sqrt()).unwrap()))
        .collect();
    let cdf = |x: f64| comps.iter().map(|(w, n)| w * n.cdf(x)).sum::<f64>();
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    (d, ks_p_value(d, n))
}

/// Two-sample KS test. Returns (D, p).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let n = (na * nb) as f64 / (na + nb) as f64;
    (d, ks_p_value(d, n))
}
