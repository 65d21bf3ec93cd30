//! Command-line harness for the negguide experiments.
//!
//! Each experiment subcommand reads an optional TOML config, runs the
//! sampler and writes CSV artifacts plus a `summary.json` into an output
//! directory. `summarize` merges those summaries into one table.

// `!(a > b)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod output;
pub mod summarize;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{ConfigFile, Kind, Overrides, OUT_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "negguide",
    version,
    about = "Guidance experiments on Gaussian mixtures"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sampled 1D densities under each guidance scheme.
    Fig1d(RunArgs),
    /// Tracked versus exact forbidden-class posterior along unguided chains.
    PosteriorCheck(RunArgs),
    /// Safety and class balance over a lambda0 sweep on the 10-mode mixture.
    ClassRemoval(RunArgs),
    /// Score-field decompositions on the 2D three-point mixture.
    Fields2d(RunArgs),
    /// Merge every summary.json below DIR into one table.
    Summarize {
        dir: PathBuf,
        /// Table path; defaults to DIR/summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config; missing keys take the experiment's defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; chain i draws from stream i of this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (also settable through NEGGUIDE_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Chains per (scheme, lambda0) run.
    #[arg(long)]
    pub samples: Option<usize>,
}

fn run_kind(kind: Kind, args: &RunArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => config::load(path)?,
        None => ConfigFile::default(),
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out.clone(),
        samples: args.samples,
    };
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let exp = config::resolve(kind, file, &overrides, env_out)?;
    let summary = experiments::run_experiment(&exp)?;
    println!(
        "{}: wrote {} files to {}",
        kind,
        summary.files.len(),
        exp.out.display()
    );
    for row in &summary.rows {
        let metrics: Vec<String> = row
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}"))
            .collect();
        println!(
            "  {} lambda0={}: {}",
            row.scheme,
            row.lambda0,
            metrics.join(" ")
        );
    }
    Ok(())
}

/// Entry point shared by the binary and the tests.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fig1d(a) => run_kind(Kind::Fig1d, &a),
        Command::PosteriorCheck(a) => run_kind(Kind::PosteriorCheck, &a),
        Command::ClassRemoval(a) => run_kind(Kind::ClassRemovalSweep, &a),
        Command::Fields2d(a) => run_kind(Kind::Fields2d, &a),
        Command::Summarize { dir, out } => {
            let outcome = summarize::summarize(&dir)?;
            // A partial table would silently drop runs, so write nothing.
            for (p, e) in &outcome.skipped {
                eprintln!("unreadable {}: {e}", p.display());
            }
            if !outcome.skipped.is_empty() {
                bail!("{} summaries could not be read", outcome.skipped.len());
            }
            let path = out.unwrap_or_else(|| dir.join("summary.csv"));
            std::fs::write(&path, &outcome.table)
                .with_context(|| format!("writing {}", path.display()))?;
            if outcome.runs == 0 {
                eprintln!(
                    "warning: no {} found under {}",
                    experiments::SUMMARY_FILE,
                    dir.display()
                );
            }
            for d in &outcome.duplicates {
                eprintln!("warning: duplicate key skipped: {d}");
            }
            println!(
                "{} rows from {} runs written to {}",
                outcome.rows,
                outcome.runs,
                path.display()
            );
            Ok(())
        }
    }
}
