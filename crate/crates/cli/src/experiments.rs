//! The four experiment kinds and their artifacts.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use negguide::metrics::{
    field_grid, guided_score_components, histogram_1d, kl_to_ideal, posterior_tracking_error,
    safety,
};
use negguide::sampler::{final_samples, run_batch};
use negguide::{ClassHistogram, RunConfig, Scheme, TrajectoryRecord};
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, Kind};
use crate::output::{Artifacts, Cell};

pub const SWEEP_COLUMNS: [&str; 6] = [
    "scheme",
    "lambda0",
    "safety",
    "kl_to_ideal",
    "n_samples",
    "seed",
];
pub const POSTERIOR_COLUMNS: [&str; 4] = ["t", "group", "tracked_mean", "exact_mean"];
pub const FIELD_COLUMNS: [&str; 4] = ["x", "y", "vx", "vy"];
pub const TRACE_COLUMNS: [&str; 4] = ["chain", "t", "lambda", "posterior"];
pub const SUMMARY_FILE: &str = "summary.json";

/// Machine-readable result of one run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub experiment: String,
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
    pub files: Vec<String>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub lambda0: f64,
    pub metrics: BTreeMap<String, f64>,
}

fn tag(scheme: Scheme, lambda0: f64) -> String {
    format!("{scheme}_lambda{lambda0}")
}

/// Runs the experiment and writes its artifacts into `exp.out`. On error
/// every file written by this run is removed again.
pub fn run_experiment(exp: &Experiment) -> Result<RunSummary> {
    let mut art = Artifacts::create(&exp.out, &format!("kind={} seed={}", exp.kind, exp.seed))?;
    let rows = match exp.kind {
        Kind::Fig1d => fig1d(exp, &mut art),
        Kind::PosteriorCheck => posterior_check(exp, &mut art),
        Kind::ClassRemovalSweep => class_removal(exp, &mut art),
        Kind::Fields2d => fields2d(exp, &mut art),
    }
    .with_context(|| format!("{} experiment", exp.kind))?;

    let mut summary = RunSummary {
        experiment: exp.kind.as_str().to_string(),
        seed: exp.seed,
        rows,
        files: Vec::new(),
        config: exp.describe(),
    };
    summary.files = art
        .written_names()
        .into_iter()
        .chain([SUMMARY_FILE.to_string()])
        .collect();
    summary.files.sort();
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    art.write_raw(SUMMARY_FILE, &text)?;
    art.commit();
    Ok(summary)
}

fn run(
    exp: &Experiment,
    scheme: Scheme,
    lambda0: f64,
    n: usize,
    record: bool,
) -> Result<Vec<TrajectoryRecord>> {
    let mut cfg = RunConfig::new(
        exp.split.clone(),
        exp.schedule.clone(),
        exp.guidance_for(scheme, lambda0),
        n,
        exp.seed,
    );
    cfg.record_trajectories = record;
    run_batch(&cfg).with_context(|| format!("scheme {scheme}, lambda0 {lambda0}"))
}

fn samples_csv(art: &mut Artifacts, name: &str, records: &[TrajectoryRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.final_sample.len());
    let columns: Vec<String> = std::iter::once("chain".to_string())
        .chain((0..dim).map(|k| format!("x0_{k}")))
        .collect();
    let columns: Vec<&str> = columns.iter().map(String::as_str).collect();
    let rows: Vec<Vec<Cell>> = records
        .iter()
        .map(|r| {
            std::iter::once(Cell::from(r.chain))
                .chain(r.final_sample.iter().map(|v| Cell::from(*v)))
                .collect()
        })
        .collect();
    art.write_csv(name, &columns, &rows)?;
    Ok(())
}

/// Per-step lambda and posterior of recorded DNG chains, `t` from T down to 1.
fn trace_csv(art: &mut Artifacts, name: &str, records: &[TrajectoryRecord]) -> Result<()> {
    let mut rows = Vec::new();
    for r in records {
        let Some(trace) = &r.trace else { continue };
        for t in (1..=trace.steps).rev() {
            let p = trace.posterior(t).unwrap_or(f64::NAN);
            rows.push(vec![
                Cell::from(r.chain),
                Cell::from(t),
                Cell::from(trace.lambda(t)[0]),
                Cell::from(p),
            ]);
        }
    }
    art.write_csv(name, &TRACE_COLUMNS, &rows)?;
    Ok(())
}

fn class_metrics(
    samples: &[Vec<f64>],
    exp: &Experiment,
    m: &mut BTreeMap<String, f64>,
) -> Result<ClassHistogram> {
    let hist = ClassHistogram::from_samples(samples, &exp.split)?;
    let s = safety(samples, &exp.split)?;
    m.insert("safety".into(), s);
    m.insert("forbidden_fraction".into(), hist.forbidden_fraction());
    // Undefined when every sample is forbidden; the row then lacks the metric.
    if let Ok(kl) = kl_to_ideal(&hist) {
        m.insert("kl_to_ideal".into(), kl);
    }
    Ok(hist)
}

fn fig1d(exp: &Experiment, art: &mut Artifacts) -> Result<Vec<SummaryRow>> {
    let (range, bins) = exp.histogram;
    let target = exp.split.allowed();
    let mut rows = Vec::new();
    for (scheme, lambdas) in &exp.arms {
        for &lambda0 in lambdas {
            let records = run(exp, *scheme, lambda0, exp.samples, false)?;
            let name = tag(*scheme, lambda0);
            samples_csv(art, &format!("samples_{name}.csv"), &records)?;

            let samples = final_samples(&records);
            let mut metrics = BTreeMap::new();
            class_metrics(&samples, exp, &mut metrics)?;
            let xs: Vec<f64> = samples.iter().map(|v| v[0]).collect();
            let h = histogram_1d(&xs, target, range, bins)?;
            metrics.insert("hist_kl".into(), h.kl);
            metrics.insert(
                "outside_fraction".into(),
                h.outside as f64 / xs.len() as f64,
            );
            metrics.insert("n_samples".into(), xs.len() as f64);
            let width = (range.1 - range.0) / bins as f64;
            let hrows: Vec<Vec<Cell>> = (0..bins)
                .map(|i| {
                    vec![
                        Cell::from(h.edges[i]),
                        Cell::from(h.edges[i + 1]),
                        Cell::from(h.counts[i]),
                        Cell::from(h.density[i]),
                        Cell::from(h.target_mass[i] / width),
                    ]
                })
                .collect();
            art.write_csv(
                &format!("histogram_{name}.csv"),
                &["bin_lo", "bin_hi", "count", "density", "target_density"],
                &hrows,
            )?;

            if scheme.is_dng() && exp.trace_chains > 0 {
                let traced = run(exp, *scheme, lambda0, exp.trace_chains, true)?;
                trace_csv(art, &format!("lambda_{name}.csv"), &traced)?;
            }
            rows.push(SummaryRow {
                scheme: *scheme,
                lambda0,
                metrics,
            });
        }
    }
    Ok(rows)
}

fn posterior_check(exp: &Experiment, art: &mut Artifacts) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for (scheme, lambdas) in &exp.arms {
        for &lambda0 in lambdas {
            let records = run(exp, *scheme, lambda0, exp.samples, true)?;
            let report = posterior_tracking_error(&records, &exp.split, &exp.schedule)?;
            let name = tag(*scheme, lambda0);
            let mut prows = Vec::new();
            let mut metrics = BTreeMap::new();
            let prior = exp.guidance.prior;
            let mut start_gap: f64 = 0.0;
            for (group, curve) in [
                ("allowed", &report.allowed),
                ("forbidden", &report.forbidden),
            ] {
                metrics.insert(format!("chains_{group}"), curve.chains as f64);
                if curve.chains == 0 {
                    continue;
                }
                start_gap = start_gap
                    .max((curve.tracked[0] - prior).abs())
                    .max((curve.exact[0] - exp.split.prior()).abs());
                let mae = curve
                    .tracked
                    .iter()
                    .zip(&curve.exact)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / curve.tracked.len() as f64;
                metrics.insert(format!("mae_{group}"), mae);
                for (k, t) in report.steps.iter().enumerate() {
                    prows.push(vec![
                        Cell::from(*t),
                        Cell::from(group),
                        Cell::from(curve.tracked[k]),
                        Cell::from(curve.exact[k]),
                    ]);
                }
            }
            metrics.insert("mae".into(), report.mae);
            metrics.insert("start_gap".into(), start_gap);
            metrics.insert("n_samples".into(), records.len() as f64);
            art.write_csv(&format!("posterior_{name}.csv"), &POSTERIOR_COLUMNS, &prows)?;
            let traced = &records[..exp.trace_chains.min(records.len())];
            if !traced.is_empty() {
                trace_csv(art, &format!("lambda_{name}.csv"), traced)?;
            }
            rows.push(SummaryRow {
                scheme: *scheme,
                lambda0,
                metrics,
            });
        }
    }
    Ok(rows)
}

fn class_removal(exp: &Experiment, art: &mut Artifacts) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut sweep = Vec::new();
    let mut counts = Vec::new();
    for (scheme, lambdas) in &exp.arms {
        for &lambda0 in lambdas {
            let samples = final_samples(&run(exp, *scheme, lambda0, exp.samples, false)?);
            let mut metrics = BTreeMap::new();
            let hist = class_metrics(&samples, exp, &mut metrics)?;
            metrics.insert("n_samples".into(), samples.len() as f64);
            sweep.push(vec![
                Cell::from(scheme.as_str()),
                Cell::from(lambda0),
                Cell::from(metrics["safety"]),
                Cell::from(metrics.get("kl_to_ideal").copied().unwrap_or(f64::NAN)),
                Cell::from(samples.len()),
                Cell::from(exp.seed),
            ]);
            for (mode, c) in hist.counts.iter().enumerate() {
                counts.push(vec![
                    Cell::from(scheme.as_str()),
                    Cell::from(lambda0),
                    Cell::from(mode),
                    Cell::from(*c),
                ]);
            }
            rows.push(SummaryRow {
                scheme: *scheme,
                lambda0,
                metrics,
            });
        }
    }
    let key = |r: &Vec<Cell>| match (&r[0], &r[1]) {
        (Cell::Text(s), Cell::Float(l)) => (s.clone(), *l),
        _ => unreachable!("sweep rows start with scheme and lambda0"),
    };
    sweep.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    counts.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    art.write_csv("sweep.csv", &SWEEP_COLUMNS, &sweep)?;
    art.write_csv(
        "class_counts.csv",
        &["scheme", "lambda0", "mode", "count"],
        &counts,
    )?;
    Ok(rows)
}

fn fields2d(exp: &Experiment, art: &mut Artifacts) -> Result<Vec<SummaryRow>> {
    let ab = exp.schedule.alpha_bar(exp.field_t)?;
    let mut rows = Vec::new();
    for (scheme, lambdas) in &exp.arms {
        for &lambda0 in lambdas {
            let grid = field_grid(
                &exp.split,
                &exp.schedule,
                exp.field_t,
                *scheme,
                lambda0,
                exp.grid,
            )?;
            let name = tag(*scheme, lambda0);
            for (component, vectors) in [
                ("unconditional", &grid.unconditional),
                ("guidance", &grid.guidance),
                ("total", &grid.total),
            ] {
                let frows: Vec<Vec<Cell>> = grid
                    .points
                    .iter()
                    .zip(vectors)
                    .map(|(p, v)| {
                        vec![
                            Cell::from(p[0]),
                            Cell::from(p[1]),
                            Cell::from(v[0]),
                            Cell::from(v[1]),
                        ]
                    })
                    .collect();
                art.write_csv(
                    &format!("field_{name}_{component}.csv"),
                    &FIELD_COLUMNS,
                    &frows,
                )?;
            }
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let mut metrics = BTreeMap::new();
            metrics.insert("t".into(), exp.field_t as f64);
            metrics.insert("alpha_bar".into(), ab);
            let gmax = grid.guidance.iter().map(|v| norm(v)).fold(0.0, f64::max);
            metrics.insert("max_guidance_norm".into(), gmax);
            // Guidance strength at each diffused mode centre.
            for (i, mean) in exp.split.full().means().iter().enumerate() {
                let x: Vec<f64> = mean.iter().map(|m| ab.sqrt() * m).collect();
                let (_, g) = guided_score_components(&exp.split, ab, *scheme, lambda0, &x)?;
                metrics.insert(format!("guidance_norm_mode{i}"), norm(&g));
            }
            rows.push(SummaryRow {
                scheme: *scheme,
                lambda0,
                metrics,
            });
        }
    }
    Ok(rows)
}
