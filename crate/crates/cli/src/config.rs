//! Experiment configuration files.
//!
//! A config file is TOML. Every section is optional: keys left out fall back
//! to the built-in defaults of the experiment kind, so an empty file runs the
//! reference experiment. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use negguide::guidance::{DEFAULT_P_MAX, DEFAULT_P_MIN};
use negguide::{
    presets, GaussianMixture, GridSpec, GuidanceConfig, MixtureSplit, NoiseSchedule, Scheme,
    SldConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Fig1d,
    PosteriorCheck,
    ClassRemovalSweep,
    Fields2d,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Fig1d => "fig1d",
            Kind::PosteriorCheck => "posterior_check",
            Kind::ClassRemovalSweep => "class_removal_sweep",
            Kind::Fields2d => "fields2d",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "three_mode_1d")]
    ThreeMode1d,
    #[serde(rename = "ten_mode_1d")]
    TenMode1d,
    #[serde(rename = "three_point_2d")]
    ThreePoint2d,
}

impl Preset {
    fn split(self) -> negguide::Result<MixtureSplit> {
        match self {
            Preset::ThreeMode1d => presets::three_mode_1d(),
            Preset::TenMode1d => presets::ten_mode_1d(),
            Preset::ThreePoint2d => presets::three_point_2d(),
        }
    }
}

/// File layout. Everything is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub kind: Option<Kind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mixture: Option<MixtureSection>,
    pub schedule: Option<ScheduleSection>,
    pub guidance: Option<GuidanceSection>,
    pub sampling: Option<SamplingSection>,
    pub histogram: Option<HistogramSection>,
    pub fields: Option<FieldsSection>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub preset: Option<Preset>,
    pub weights: Option<Vec<f64>>,
    pub means: Option<Vec<Vec<f64>>>,
    pub variances: Option<Vec<f64>>,
    pub forbidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: Option<usize>,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub schemes: Option<Vec<Scheme>>,
    pub lambda0: Option<Vec<f64>>,
    /// Per-scheme lambda0 grids, overriding `lambda0` for that scheme.
    pub lambda0_per_scheme: Option<BTreeMap<Scheme, Vec<f64>>>,
    pub prior: Option<f64>,
    pub tau: Option<f64>,
    pub delta: Option<f64>,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
    pub sld: Option<SldConfig>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub samples: Option<usize>,
    pub trace_chains: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSection {
    pub range: Option<[f64; 2]>,
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsSection {
    pub t: Option<usize>,
    pub x_range: Option<[f64; 2]>,
    pub y_range: Option<[f64; 2]>,
    pub nx: Option<usize>,
    pub ny: Option<usize>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub samples: Option<usize>,
}

/// Environment variable that may replace the output directory.
pub const OUT_ENV: &str = "NEGGUIDE_OUT";

/// Fully resolved experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub kind: Kind,
    pub seed: u64,
    pub out: PathBuf,
    pub mixture: MixtureSection,
    pub split: MixtureSplit,
    pub schedule: NoiseSchedule,
    pub schedule_params: (usize, f64, f64),
    /// Shared tracker and baseline hyperparameters; scheme and lambda0 are set per run.
    pub guidance: GuidanceConfig,
    /// Schemes in run order, each with its lambda0 grid.
    pub arms: Vec<(Scheme, Vec<f64>)>,
    pub samples: usize,
    pub trace_chains: usize,
    pub histogram: ((f64, f64), usize),
    pub field_t: usize,
    pub grid: GridSpec,
}

impl Experiment {
    pub fn guidance_for(&self, scheme: Scheme, lambda0: f64) -> GuidanceConfig {
        GuidanceConfig {
            scheme,
            lambda0,
            sld: (scheme == Scheme::Sld).then(|| self.guidance.sld.clone().unwrap_or_default()),
            ..self.guidance.clone()
        }
    }

    /// Resolved settings as JSON, echoed into the run summary.
    pub fn describe(&self) -> serde_json::Value {
        let (steps, beta_min, beta_max) = self.schedule_params;
        let g = &self.guidance;
        serde_json::json!({
            "kind": self.kind,
            "seed": self.seed,
            "mixture": self.mixture,
            "schedule": {"steps": steps, "beta_min": beta_min, "beta_max": beta_max},
            "guidance": {
                "arms": self.arms.iter().map(|(s, l)| serde_json::json!({"scheme": s, "lambda0": l})).collect::<Vec<_>>(),
                "prior": g.prior,
                "tau": g.tau,
                "delta": g.delta,
                "p_min": g.p_min,
                "p_max": g.p_max,
                "sld": g.sld,
            },
            "samples": self.samples,
            "trace_chains": self.trace_chains,
            "histogram": {"range": [self.histogram.0 .0, self.histogram.0 .1], "bins": self.histogram.1},
            "fields": {
                "t": self.field_t,
                "x_range": [self.grid.x_range.0, self.grid.x_range.1],
                "y_range": [self.grid.y_range.0, self.grid.y_range.1],
                "nx": self.grid.nx,
                "ny": self.grid.ny,
            },
        })
    }
}

impl FromStr for ConfigFile {
    type Err = anyhow::Error;

    fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("invalid config: {e}"))
    }
}

pub fn load(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    text.parse()
        .with_context(|| format!("in {}", path.display()))
}

struct Defaults {
    preset: Preset,
    schedule: (usize, f64, f64),
    schemes: &'static [(Scheme, &'static [f64])],
    tracker: GuidanceConfig,
    samples: usize,
    trace_chains: usize,
}

fn defaults(kind: Kind) -> Defaults {
    use Scheme::*;
    let base = GuidanceConfig::high_prior(None, 0.0);
    match kind {
        Kind::Fig1d => Defaults {
            preset: Preset::ThreeMode1d,
            schedule: (1000, 1e-4, 0.02),
            schemes: &[
                (None, &[0.0]),
                (Cfg, &[1.0]),
                (Np, &[1.0]),
                (DngExact, &[1.0]),
            ],
            tracker: base,
            samples: 100_000,
            trace_chains: 16,
        },
        // Steeper betas drive alpha_bar_T to ~1e-11, so both posterior curves
        // start at the prior.
        Kind::PosteriorCheck => Defaults {
            preset: Preset::ThreeMode1d,
            schedule: (1000, 1e-4, 0.05),
            schemes: &[(DngTracked, &[0.0])],
            tracker: GuidanceConfig {
                tau: 1.0,
                delta: 0.0,
                ..base
            },
            samples: 10_000,
            trace_chains: 16,
        },
        Kind::ClassRemovalSweep => Defaults {
            preset: Preset::TenMode1d,
            schedule: (1000, 1e-4, 0.02),
            schemes: &[
                (Np, &[0.25, 0.5, 1.0, 2.0]),
                (DngTracked, &[0.5, 1.0, 2.0, 5.0, 10.0]),
            ],
            tracker: GuidanceConfig::low_prior(None, 0.0),
            samples: 10_000,
            trace_chains: 0,
        },
        Kind::Fields2d => Defaults {
            preset: Preset::ThreePoint2d,
            schedule: (1000, 1e-4, 0.02),
            schemes: &[(Cfg, &[1.0]), (Np, &[1.0]), (DngExact, &[1.0])],
            tracker: base,
            samples: 0,
            trace_chains: 0,
        },
    }
}

fn build_split(m: &MixtureSection, default: Preset) -> Result<MixtureSplit> {
    let explicit =
        m.weights.is_some() || m.means.is_some() || m.variances.is_some() || m.forbidden.is_some();
    if m.preset.is_some() && explicit {
        bail!("mixture.preset cannot be combined with explicit mixture keys");
    }
    if !explicit {
        return Ok(m.preset.unwrap_or(default).split()?);
    }
    let need = |name: &str| anyhow!("mixture.{name} is required for an explicit mixture");
    let weights = m.weights.clone().ok_or_else(|| need("weights"))?;
    let means = m.means.clone().ok_or_else(|| need("means"))?;
    let variances = m.variances.clone().ok_or_else(|| need("variances"))?;
    let forbidden = m.forbidden.clone().ok_or_else(|| need("forbidden"))?;
    let full = GaussianMixture::from_unnormalized(weights, means, variances).context("mixture")?;
    MixtureSplit::new(full, &forbidden).context("mixture.forbidden")
}

/// Merges file, command line and environment into a runnable experiment.
/// Precedence: command line, then environment (output directory only), then file, then defaults.
pub fn resolve(
    kind: Kind,
    file: ConfigFile,
    cli: &Overrides,
    env_out: Option<PathBuf>,
) -> Result<Experiment> {
    if let Some(k) = file.kind {
        if k != kind {
            bail!("kind: config is for `{k}` but the `{kind}` experiment was requested");
        }
    }
    let d = defaults(kind);

    let mixture = file.mixture.unwrap_or_default();
    let split = build_split(&mixture, d.preset)?;
    let mixture = if mixture.preset.is_none() && mixture.weights.is_none() {
        MixtureSection {
            preset: Some(d.preset),
            ..mixture
        }
    } else {
        mixture
    };

    let s = file.schedule.unwrap_or_default();
    let schedule_params = (
        s.steps.unwrap_or(d.schedule.0),
        s.beta_min.unwrap_or(d.schedule.1),
        s.beta_max.unwrap_or(d.schedule.2),
    );
    let schedule = NoiseSchedule::linear(schedule_params.0, schedule_params.1, schedule_params.2)
        .context("schedule")?;

    let g = file.guidance.unwrap_or_default();
    let schemes = match g.schemes {
        Some(list) if list.is_empty() => bail!("guidance.schemes: list must not be empty"),
        Some(list) => list,
        None => d.schemes.iter().map(|(s, _)| *s).collect(),
    };
    let per_scheme = g.lambda0_per_scheme.unwrap_or_default();
    if let Some(s) = per_scheme.keys().find(|s| !schemes.contains(s)) {
        bail!("guidance.lambda0_per_scheme.{s}: scheme is not in guidance.schemes");
    }
    let mut arms = Vec::new();
    for scheme in schemes {
        if arms.iter().any(|(s, _)| *s == scheme) {
            bail!("guidance.schemes: `{scheme}` listed twice");
        }
        let (key, lambdas) = if let Some(l) = per_scheme.get(&scheme) {
            (format!("guidance.lambda0_per_scheme.{scheme}"), l.clone())
        } else if let Some(l) = &g.lambda0 {
            ("guidance.lambda0".to_string(), l.clone())
        } else {
            let fallback = d
                .schemes
                .iter()
                .find(|(s, _)| *s == scheme)
                .map(|(_, l)| l.to_vec());
            (
                "guidance.lambda0".to_string(),
                fallback.unwrap_or_else(|| vec![1.0]),
            )
        };
        if lambdas.is_empty() {
            bail!("{key}: list must not be empty");
        }
        if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            bail!("{key}: lambda0 = {l} must be finite and non-negative");
        }
        let mut sorted = lambdas.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() != lambdas.len() {
            bail!("{key}: duplicate lambda0 values");
        }
        arms.push((scheme, lambdas));
    }

    let guidance = GuidanceConfig {
        scheme: Scheme::None,
        lambda0: 0.0,
        prior: g.prior.unwrap_or(if kind == Kind::PosteriorCheck {
            split.prior()
        } else {
            d.tracker.prior
        }),
        tau: g.tau.unwrap_or(d.tracker.tau),
        delta: g.delta.unwrap_or(d.tracker.delta),
        p_min: g.p_min.unwrap_or(DEFAULT_P_MIN),
        p_max: g.p_max.unwrap_or(DEFAULT_P_MAX),
        sld: g.sld,
    };
    GuidanceConfig {
        sld: None,
        ..guidance.clone()
    }
    .validate()
    .map_err(|e| anyhow!("guidance: {e}"))?;
    if let Some(sld) = &guidance.sld {
        sld.validate().map_err(|e| anyhow!("guidance.{e}"))?;
    }

    let sampling = file.sampling.unwrap_or_default();
    let samples = cli.samples.or(sampling.samples).unwrap_or(d.samples);
    if kind != Kind::Fields2d && samples == 0 {
        bail!("sampling.samples must be at least 1");
    }
    let trace_chains = sampling.trace_chains.unwrap_or(d.trace_chains).min(samples);

    let h = file.histogram.unwrap_or_default();
    let range = h.range.unwrap_or([-10.0, 10.0]);
    let bins = h.bins.unwrap_or(200);
    if !(range[0] < range[1]) {
        bail!("histogram.range must be increasing");
    }
    if bins == 0 {
        bail!("histogram.bins must be positive");
    }

    let f = file.fields.unwrap_or_default();
    let dg = presets::three_point_grid();
    let grid = GridSpec {
        x_range: f.x_range.map(|r| (r[0], r[1])).unwrap_or(dg.x_range),
        y_range: f.y_range.map(|r| (r[0], r[1])).unwrap_or(dg.y_range),
        nx: f.nx.unwrap_or(dg.nx),
        ny: f.ny.unwrap_or(dg.ny),
    };
    let field_t = f.t.unwrap_or(schedule.steps() / 4);
    if kind == Kind::Fields2d {
        if grid.nx < 2
            || grid.ny < 2
            || !(grid.x_range.0 < grid.x_range.1)
            || !(grid.y_range.0 < grid.y_range.1)
        {
            bail!("fields: need nx, ny >= 2 and increasing ranges");
        }
        if field_t == 0 || field_t > schedule.steps() {
            bail!("fields.t = {field_t} outside 1..={}", schedule.steps());
        }
        if split.dim() != 2 {
            bail!(
                "mixture: fields2d needs a 2D mixture, got dimension {}",
                split.dim()
            );
        }
        if let Some((s, _)) = arms
            .iter()
            .find(|(s, _)| matches!(s, Scheme::DngTracked | Scheme::Sld))
        {
            bail!("guidance.schemes: `{s}` has no closed-form field");
        }
    }
    if kind == Kind::Fig1d && split.dim() != 1 {
        bail!(
            "mixture: fig1d needs a 1D mixture, got dimension {}",
            split.dim()
        );
    }
    if kind == Kind::PosteriorCheck && arms.iter().any(|(s, _)| *s != Scheme::DngTracked) {
        bail!("guidance.schemes: posterior_check runs only `dng_tracked`");
    }

    let out = cli
        .out
        .clone()
        .or(env_out)
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("runs").join(kind.as_str()));

    Ok(Experiment {
        kind,
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out,
        mixture,
        split,
        schedule,
        schedule_params,
        guidance,
        arms,
        samples,
        trace_chains,
        histogram: ((range[0], range[1]), bins),
        field_t,
        grid,
    })
}
