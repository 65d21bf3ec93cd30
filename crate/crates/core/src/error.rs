use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("mixture mode {mode} has zero variance; diffuse it before evaluating densities")]
    DegenerateMixture { mode: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside [1, {steps}]")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("alpha_bar = {0} leaves no noise; score and noise are not interconvertible")]
    ZeroNoiseLevel(f64),

    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("transition variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("invalid guidance config: {0}")]
    InvalidGuidance(String),

    #[error("invalid run config: {0}")]
    InvalidRun(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("at step t={t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, t: usize) -> Error {
        Error::AtStep {
            t,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
