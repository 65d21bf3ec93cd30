//! Negative guidance for diffusion sampling, studied on Gaussian mixtures.
//!
//! Diffused Gaussian mixtures have closed-form scores and class posteriors, so
//! every guidance rule here (classifier-free guidance, negative prompting,
//! dynamic negative guidance with an exact or a tracked posterior, and a
//! thresholded elementwise baseline) can be run and checked against exact
//! quantities.
//!
//! - [`mixture`]: densities, scores, diffusion and Bayes posteriors of mixtures.
//! - [`schedule`]: discrete variance-preserving noise schedules.
//! - [`guidance`]: guidance combinators and the Markov-chain posterior tracker.
//! - [`sampler`]: reverse DDPM chains and reproducible batches.
//! - [`metrics`]: safety, class-balance KL, tracking error, histograms, fields.
//! - [`presets`]: the reference mixtures used by the experiments.

// `!(a > b)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod guidance;
pub mod metrics;
pub mod mixture;
pub mod presets;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use guidance::{GuidanceConfig, PosteriorState, Scheme, SldConfig, SldState};
pub use metrics::{ClassHistogram, FieldGrid, GridSpec, Histogram1d, TrackingReport};
pub use mixture::{GaussianMixture, MixtureSplit};
pub use sampler::{RunConfig, Sampler, ScoreProvider, TrajectoryRecord};
pub use schedule::NoiseSchedule;
