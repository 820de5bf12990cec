//! L1-penalized least squares on complete cases.
//!
//! [`lasso_cd`] minimizes
//!
//! ```text
//! (1/n) sum_{i : R_i = 1} (Y_i - X_i^T b)^2 + lambda |b|_1
//! ```
//!
//! by cyclic coordinate descent, where `n` is the full sample size (the sum
//! only runs over complete cases). [`scaled_lasso`] wraps it in the
//! alternating scheme that fits the coefficients and the noise level jointly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DebiasError, Result};
use crate::model::PilotFit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    /// Stop once the largest coordinate change of a sweep falls below this.
    pub tol: f64,
    pub max_sweeps: usize,
    pub max_scaled_iters: usize,
    pub sigma_tol: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            tol: 1e-7,
            max_sweeps: 10_000,
            max_scaled_iters: 100,
            sigma_tol: 1e-6,
        }
    }
}

impl LassoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.sigma_tol > 0.0) {
            return Err(DebiasError::invalid("lasso tolerances must be positive"));
        }
        if self.max_sweeps == 0 || self.max_scaled_iters == 0 {
            return Err(DebiasError::invalid("lasso iteration limits must be at least 1"));
        }
        Ok(())
    }
}

/// `sign(u) * max(|u| - t, 0)`.
#[inline]
pub fn soft_threshold(u: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub beta: Array1<f64>,
    pub objective: f64,
    pub sweeps: usize,
    /// False when `max_sweeps` ran out before the change criterion was met.
    pub converged: bool,
    /// Columns with no complete-case signal, left at their starting value.
    pub untouched: Vec<usize>,
    /// Sweeps whose objective rose above the previous one (beyond rounding).
    pub monotone_violations: usize,
}

pub fn lasso_objective(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    n_norm: usize,
    lambda: f64,
    beta: ArrayView1<f64>,
) -> f64 {
    let r = &y - &x.dot(&beta);
    r.dot(&r) / n_norm as f64 + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Cyclic coordinate descent for the complete-case Lasso.
///
/// `x_cc`/`y_cc` hold only the complete cases; `n_norm` is the sample size
/// used in the `1/n` factor.
pub fn lasso_cd(
    x_cc: ArrayView2<f64>,
    y_cc: ArrayView1<f64>,
    n_norm: usize,
    lambda: f64,
    cfg: &LassoConfig,
    warm_start: Option<ArrayView1<f64>>,
) -> Result<LassoFit> {
    cfg.validate()?;
    let (m, d) = x_cc.dim();
    if m == 0 {
        return Err(DebiasError::invalid("lasso needs at least one complete case"));
    }
    check_len("lasso response", m, y_cc.len())?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(DebiasError::invalid(format!("lasso penalty must be >= 0, got {lambda}")));
    }
    if n_norm == 0 {
        return Err(DebiasError::invalid("normalizing sample size must be positive"));
    }
    let inv_n = 1.0 / n_norm as f64;

    let mut beta = match warm_start {
        Some(w) => {
            check_len("lasso warm start", d, w.len())?;
            w.to_owned()
        }
        None => Array1::zeros(d),
    };

    // Columns stored contiguously for the inner loops.
    let cols: Array2<f64> = x_cc.t().as_standard_layout().into_owned();
    let curvature: Vec<f64> = cols.rows().into_iter().map(|c| c.dot(&c) * inv_n).collect();
    let untouched: Vec<usize> = (0..d).filter(|&j| curvature[j] == 0.0).collect();
    if lambda == 0.0 && !untouched.is_empty() {
        return Err(DebiasError::Degenerate(format!(
            "column {} has no complete-case variation and lambda = 0",
            untouched[0] + 1
        )));
    }

    let mut resid = &y_cc - &x_cc.dot(&beta);
    let half_lambda = 0.5 * lambda;
    let objective_of = |resid: &Array1<f64>, beta: &Array1<f64>| {
        resid.dot(resid) * inv_n + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let mut objective = objective_of(&resid, &beta);
    let mut monotone_violations = 0;
    let mut sweeps = 0;
    let mut converged = false;

    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..d {
            let a = curvature[j];
            if a == 0.0 {
                continue;
            }
            let col = cols.row(j);
            let old = beta[j];
            let rho = col.dot(&resid) * inv_n + a * old;
            let new = soft_threshold(rho, half_lambda) / a;
            let delta = new - old;
            if delta != 0.0 {
                resid.scaled_add(-delta, &col);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        let next = objective_of(&resid, &beta);
        if next > objective + 1e-12 * (1.0 + objective.abs()) {
            monotone_violations += 1;
        }
        objective = next;
        if max_change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(LassoFit {
        beta,
        objective,
        sweeps,
        converged,
        untouched,
        monotone_violations,
    })
}

/// `sqrt(2 log d / n)`, the starting penalty of the scaled Lasso.
pub fn universal_lambda(d: usize, n: usize) -> f64 {
    (2.0 * (d as f64).ln() / n as f64).sqrt()
}

/// Scaled Lasso with the universal starting penalty.
pub fn scaled_lasso(
    x_cc: ArrayView2<f64>,
    y_cc: ArrayView1<f64>,
    n_norm: usize,
    cfg: &LassoConfig,
) -> Result<PilotFit> {
    let lambda0 = universal_lambda(x_cc.ncols(), n_norm);
    scaled_lasso_with(x_cc, y_cc, n_norm, lambda0, cfg)
}

/// Scaled Lasso with an explicit scale-free penalty `lambda0`.
///
/// Alternates a Lasso step at the current noise level with the update
/// `sigma = sqrt(mean complete-case squared residual)`. The Lasso step
/// minimizes `(1/(2n sigma)) sum R_i (Y_i - X_i^T b)^2 + lambda0 |b|_1`, which
/// is [`lasso_cd`] at `lambda = 2 lambda0 sigma`.
pub fn scaled_lasso_with(
    x_cc: ArrayView2<f64>,
    y_cc: ArrayView1<f64>,
    n_norm: usize,
    lambda0: f64,
    cfg: &LassoConfig,
) -> Result<PilotFit> {
    cfg.validate()?;
    let m = x_cc.nrows();
    if m < 2 {
        return Err(DebiasError::invalid(format!(
            "scaled lasso needs at least 2 complete cases, got {m}"
        )));
    }
    check_len("lasso response", m, y_cc.len())?;
    if !(lambda0 >= 0.0) || !lambda0.is_finite() {
        return Err(DebiasError::invalid("scaled lasso penalty must be >= 0"));
    }

    let mean = y_cc.sum() / m as f64;
    let sd = (y_cc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
    let rms = (y_cc.dot(&y_cc) / m as f64).sqrt();
    let scale = if sd > 0.0 { sd } else { rms };
    if scale == 0.0 {
        return Err(DebiasError::Degenerate("complete-case outcomes are all zero".into()));
    }
    let floor = 1e-10 * scale;

    let mut sigma = rms;
    let mut beta = Array1::zeros(x_cc.ncols());
    let mut lambda = 2.0 * lambda0 * sigma;
    let mut inner_converged = true;
    let mut converged = false;
    let mut floored = false;
    let mut iterations = 0;

    while iterations < cfg.max_scaled_iters {
        iterations += 1;
        lambda = 2.0 * lambda0 * sigma;
        let fit = lasso_cd(x_cc, y_cc, n_norm, lambda, cfg, Some(beta.view()))?;
        inner_converged = fit.converged;
        beta = fit.beta;
        let resid = &y_cc - &x_cc.dot(&beta);
        let next = (resid.dot(&resid) / m as f64).sqrt();
        if !next.is_finite() {
            return Err(DebiasError::Degenerate("noise level update is not finite".into()));
        }
        if next < floor {
            sigma = floor;
            floored = true;
            converged = true;
            break;
        }
        let change = (next - sigma).abs();
        sigma = next;
        if change < cfg.sigma_tol {
            converged = true;
            break;
        }
    }

    Ok(PilotFit {
        beta_hat: beta.to_vec(),
        sigma_hat: sigma,
        lambda,
        iterations,
        converged: converged && inner_converged,
        sigma_floored: floored,
    })
}
