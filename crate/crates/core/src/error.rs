use std::fmt;

use thiserror::Error;

/// Pipeline stage identifiers, used to tag failures surfaced by
/// [`crate::inference::run_pipeline`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pilot,
    Propensity,
    Tuning,
    Debias,
    Interval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Pilot => "pilot",
            Stage::Propensity => "propensity",
            Stage::Tuning => "tuning",
            Stage::Debias => "debias",
            Stage::Interval => "interval",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("no grid value of gamma is primal-feasible on every fold")]
    InfeasibleEverywhere,

    #[error("negative variance estimate {0}; some propensity estimates are negative")]
    NegativeVariance(f64),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<DebiasError>,
    },
}

impl DebiasError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DebiasError::InvalidInput(msg.into())
    }

    pub(crate) fn at(self, stage: Stage) -> Self {
        DebiasError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures caused by the numerics (degeneracy, infeasibility)
    /// rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        match self {
            DebiasError::DimensionMismatch { .. } | DebiasError::InvalidInput(_) => false,
            DebiasError::NotPositiveDefinite
            | DebiasError::Degenerate(_)
            | DebiasError::InfeasibleEverywhere
            | DebiasError::NegativeVariance(_) => true,
            DebiasError::Stage { source, .. } => source.is_numerical(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DebiasError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DebiasError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
