//! End-to-end debiased inference at a query point.
//!
//! [`run_pipeline`] chains the pilot fit on complete cases, the propensity
//! fit on all rows, the cross-validated choice of `gamma`, the dual solve, and
//! the point estimate with its normal-approximation interval. Each stage's
//! artifacts are returned, and on failure whatever was computed so far is
//! kept in the error.

use std::fmt;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_len, DebiasError, Result, Stage};
use crate::lasso::{scaled_lasso, LassoConfig};
use crate::model::{
    regression_value, Dataset, DebiasSolution, InferenceResult, PilotFit, PropensityEstimate, QueryPoint,
};
use crate::propensity::{LogisticConfig, LogisticLasso, OraclePropensity, PropensityEstimator, ZetaChoice};
use crate::solver::solve_debias;
use crate::tuning::{cv_gamma, CvConfig, GammaRule, GammaSelection};

/// `x^T beta + (1/sqrt(n)) sum_i w_i R_i (Y_i - X_i^T beta)`.
pub fn debiased_estimate(x: &QueryPoint, beta_hat: &[f64], weights: &[f64], data: &Dataset) -> Result<f64> {
    let n = data.n();
    check_len("weights", n, weights.len())?;
    let base = regression_value(x, beta_hat)?;
    let beta = ArrayView1::from(beta_hat);
    let cov = data.covariates();
    let mut correction = 0.0;
    for i in 0..n {
        if data.observed()[i] {
            correction += weights[i] * (data.outcomes()[i] - cov.row(i).dot(&beta));
        }
    }
    Ok(base + correction / (n as f64).sqrt())
}

/// The same estimate written through the dual solution:
/// `x^T beta - (1/(2n)) sum_i R_i (X_i^T l) (Y_i - X_i^T beta)`.
pub fn debiased_estimate_dual(x: &QueryPoint, beta_hat: &[f64], ell_hat: &[f64], data: &Dataset) -> Result<f64> {
    let (n, d) = (data.n(), data.d());
    check_len("dual solution", d, ell_hat.len())?;
    let base = regression_value(x, beta_hat)?;
    let beta = ArrayView1::from(beta_hat);
    let ell = ArrayView1::from(ell_hat);
    let cov = data.covariates();
    let mut correction = 0.0;
    for i in 0..n {
        if data.observed()[i] {
            let row = cov.row(i);
            correction += row.dot(&ell) * (data.outcomes()[i] - row.dot(&beta));
        }
    }
    Ok(base - correction / (2.0 * n as f64))
}

/// `sum pi_i w_i^2`; negative only when some `pi_i` is.
pub fn variance_estimate(pi_hat: &[f64], weights: &[f64]) -> Result<f64> {
    check_len("weights", pi_hat.len(), weights.len())?;
    Ok(pi_hat.iter().zip(weights).map(|(p, w)| p * w * w).sum())
}

/// Two-sided standard normal quantile for coverage `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    check_level(level)?;
    Ok(Normal::standard().inverse_cdf(0.5 + 0.5 * level))
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(DebiasError::invalid(format!("confidence level must lie in (0, 1), got {level}")))
    }
}

/// `m_hat +/- z sigma sqrt(variance_hat / n)`.
pub fn confidence_interval(m_hat: f64, variance_hat: f64, sigma: f64, level: f64, n: usize) -> Result<(f64, f64)> {
    if variance_hat < 0.0 {
        return Err(DebiasError::NegativeVariance(variance_hat));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DebiasError::invalid(format!("noise level must be positive, got {sigma}")));
    }
    if n == 0 {
        return Err(DebiasError::invalid("sample size must be positive"));
    }
    let half = normal_quantile(level)? * sigma * (variance_hat / n as f64).sqrt();
    Ok((m_hat - half, m_hat + half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PropensityChoice {
    /// L1-penalized logistic regression of `R` on `X`; `zeta = None`
    /// cross-validates the penalty with the pipeline seed.
    LogisticLasso {
        zeta: Option<f64>,
        folds: usize,
        points: usize,
        config: LogisticConfig,
    },
    /// Known propensities, one per row.
    Oracle { probs: Vec<f64> },
}

impl Default for PropensityChoice {
    fn default() -> Self {
        PropensityChoice::LogisticLasso {
            zeta: None,
            folds: 5,
            points: 40,
            config: LogisticConfig {
                fit_intercept: true,
                ..LogisticConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SigmaSource {
    ScaledLasso,
    Fixed { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub propensity: PropensityChoice,
    pub gamma_rule: GammaRule,
    pub level: f64,
    pub sigma: SigmaSource,
    /// Seeds every fold split: the propensity CV uses `seed`, the `gamma`
    /// CV uses `seed + 1`.
    pub seed: u64,
    /// Cross-validation of `gamma`; its own `seed` field is ignored.
    pub cv: CvConfig,
    /// Use this `gamma` instead of cross-validating.
    pub gamma: Option<f64>,
    pub lasso: LassoConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            propensity: PropensityChoice::default(),
            gamma_rule: GammaRule::OneSe,
            level: 0.95,
            sigma: SigmaSource::ScaledLasso,
            seed: 0,
            cv: CvConfig::default(),
            gamma: None,
            lasso: LassoConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_level(self.level)?;
        if let SigmaSource::Fixed { sigma } = self.sigma {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(DebiasError::invalid(format!("noise level must be positive, got {sigma}")));
            }
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return Err(DebiasError::invalid(format!("gamma must be positive, got {g}")));
            }
        }
        self.lasso.validate()?;
        self.cv.dual.validate()
    }

    /// The propensity model described by `propensity`, seeded from `seed`.
    pub fn propensity_estimator(&self) -> Result<Box<dyn PropensityEstimator>> {
        Ok(match &self.propensity {
            PropensityChoice::Oracle { probs } => Box::new(OraclePropensity::new(probs.clone())?),
            PropensityChoice::LogisticLasso {
                zeta,
                folds,
                points,
                config,
            } => Box::new(LogisticLasso {
                zeta: match zeta {
                    Some(z) => ZetaChoice::Fixed { zeta: *z },
                    None => ZetaChoice::CrossValidated {
                        folds: *folds,
                        points: *points,
                        seed: self.propensity_seed(),
                    },
                },
                config: *config,
            }),
        })
    }

    pub fn propensity_seed(&self) -> u64 {
        self.seed
    }

    pub fn gamma_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutput {
    pub result: InferenceResult,
    /// The estimate recomputed from the dual solution.
    pub m_hat_dual: f64,
    pub pilot: PilotFit,
    pub propensity: PropensityEstimate,
    /// Absent when `gamma` was fixed in the configuration.
    pub selection: Option<GammaSelection>,
    pub gamma_rule: Option<GammaRule>,
    pub solution: DebiasSolution,
    pub seed: u64,
    pub missing_rate: f64,
}

/// Artifacts finished before a pipeline failure.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PartialResults {
    pub pilot: Option<PilotFit>,
    pub propensity: Option<PropensityEstimate>,
    pub selection: Option<GammaSelection>,
    pub solution: Option<DebiasSolution>,
}

#[derive(Debug)]
pub struct PipelineFailure {
    /// Always a [`DebiasError::Stage`].
    pub error: DebiasError,
    pub partial: Box<PartialResults>,
}

impl PipelineFailure {
    pub fn stage(&self) -> Option<Stage> {
        match &self.error {
            DebiasError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for PipelineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<PipelineFailure> for DebiasError {
    fn from(f: PipelineFailure) -> Self {
        f.error
    }
}

/// Runs every stage with the propensity model chosen in `cfg`.
pub fn run_pipeline(
    data: &Dataset,
    x: &QueryPoint,
    cfg: &PipelineConfig,
) -> std::result::Result<PipelineOutput, PipelineFailure> {
    let estimator = cfg.propensity_estimator().map_err(|e| PipelineFailure {
        error: e.at(Stage::Propensity),
        partial: Box::default(),
    })?;
    run_pipeline_with(data, x, cfg, estimator.as_ref())
}

/// Runs every stage with a caller-supplied propensity model; the
/// `propensity` field of `cfg` is ignored.
pub fn run_pipeline_with(
    data: &Dataset,
    x: &QueryPoint,
    cfg: &PipelineConfig,
    estimator: &dyn PropensityEstimator,
) -> std::result::Result<PipelineOutput, PipelineFailure> {
    let mut partial = PartialResults::default();
    macro_rules! stage {
        ($stage:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => {
                    let error: DebiasError = err;
                    log::debug!("pipeline failed at {} stage: {error}", $stage);
                    return Err(PipelineFailure {
                        error: error.at($stage),
                        partial: Box::new(partial),
                    });
                }
            }
        };
    }

    stage!(Stage::Pilot, cfg.validate().and_then(|_| x.check_dim(data.d())));
    let n = data.n();
    let x_mat = data.covariates();

    let (x_cc, y_cc) = data.complete_case_view();
    let pilot = stage!(Stage::Pilot, scaled_lasso(x_cc.view(), y_cc.view(), n, &cfg.lasso));
    partial.pilot = Some(pilot.clone());

    let propensity = stage!(Stage::Propensity, estimator.fit(x_mat, data.observed()));
    stage!(Stage::Propensity, check_len("propensity estimates", n, propensity.pi_hat.len()));
    partial.propensity = Some(propensity.clone());
    let pi_hat = &propensity.pi_hat;

    let (gamma, selection, gamma_rule) = match cfg.gamma {
        Some(g) => (g, None, None),
        None => {
            let cv = CvConfig {
                seed: cfg.gamma_seed(),
                ..cfg.cv.clone()
            };
            let sel = stage!(Stage::Tuning, cv_gamma(x_mat, pi_hat, x, &cv));
            partial.selection = Some(sel.clone());
            let g = stage!(Stage::Tuning, sel.select(cfg.gamma_rule));
            (g, Some(sel), Some(cfg.gamma_rule))
        }
    };

    let solution = stage!(Stage::Debias, solve_debias(x_mat, pi_hat, x, gamma, &cfg.cv.dual));
    partial.solution = Some(solution.clone());

    let m_hat = stage!(Stage::Interval, debiased_estimate(x, &pilot.beta_hat, &solution.weights, data));
    let m_hat_dual = stage!(Stage::Interval, debiased_estimate_dual(x, &pilot.beta_hat, &solution.ell_hat, data));
    let variance_hat = stage!(Stage::Interval, variance_estimate(pi_hat, &solution.weights));
    let sigma_used = match cfg.sigma {
        SigmaSource::ScaledLasso => pilot.sigma_hat,
        SigmaSource::Fixed { sigma } => sigma,
    };
    let (ci_lower, ci_upper) = stage!(
        Stage::Interval,
        confidence_interval(m_hat, variance_hat, sigma_used, cfg.level, n)
    );

    Ok(PipelineOutput {
        result: InferenceResult {
            m_hat,
            variance_hat,
            sigma_used,
            ci_lower,
            ci_upper,
            level: cfg.level,
        },
        m_hat_dual,
        pilot,
        propensity,
        selection,
        gamma_rule,
        solution,
        seed: cfg.seed,
        missing_rate: data.missing_rate(),
    })
}
