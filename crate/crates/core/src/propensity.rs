//! Propensity score estimation, `pi(X_i) = P(R_i = 1 | X_i)`.
//!
//! Any estimator can be plugged into the pipeline through
//! [`PropensityEstimator`]. Two are provided: known probabilities
//! ([`OraclePropensity`]) and L1-penalized logistic regression
//! ([`LogisticLasso`]) fitted by monotone accelerated proximal gradient.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DebiasError, Result};
use crate::folds::{argmin_prefer_last, assign_folds, split};
use crate::lasso::soft_threshold;
use crate::model::PropensityEstimate;

/// Clipping applied to probabilities inside the held-out log-loss only.
const DEVIANCE_CLIP: f64 = 1e-12;

pub trait PropensityEstimator: Send + Sync {
    fn fit(&self, covariates: ArrayView2<f64>, observed: &[bool]) -> Result<PropensityEstimate>;
}

/// Known propensity scores, passed through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePropensity {
    probs: Vec<f64>,
}

impl OraclePropensity {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, &p)| !(p > 0.0 && p <= 1.0)) {
            return Err(DebiasError::invalid(format!(
                "oracle propensity {p} at row {} is outside (0, 1]",
                i + 1
            )));
        }
        Ok(OraclePropensity { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl PropensityEstimator for OraclePropensity {
    fn fit(&self, covariates: ArrayView2<f64>, observed: &[bool]) -> Result<PropensityEstimate> {
        check_len("oracle propensities", covariates.nrows(), self.probs.len())?;
        check_len("missingness mask", covariates.nrows(), observed.len())?;
        Ok(PropensityEstimate::from_probs(self.probs.clone()))
    }
}

pub fn oracle_propensity(probs: Vec<f64>) -> Result<PropensityEstimate> {
    Ok(PropensityEstimate::from_probs(OraclePropensity::new(probs)?.probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// Stop when the sup-norm of the proximal gradient mapping drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Fit an unpenalized intercept alongside the penalized coefficients.
    pub fit_intercept: bool,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            tol: 1e-6,
            max_iter: 10_000,
            fit_intercept: false,
        }
    }
}

impl LogisticConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(DebiasError::invalid("logistic tolerance and iteration limit must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub theta: Array1<f64>,
    pub intercept: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub monotone_violations: usize,
}

impl LogisticFit {
    /// Fitted probabilities, kept strictly inside (0, 1) even where the
    /// logistic map rounds to an endpoint.
    pub fn probabilities(&self, x: ArrayView2<f64>) -> Vec<f64> {
        const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
        x.dot(&self.theta)
            .iter()
            .map(|s| sigmoid(s + self.intercept).clamp(f64::MIN_POSITIVE, UPPER))
            .collect()
    }
}

#[inline]
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(s))` without overflow.
#[inline]
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn mean_loss(scores: &Array1<f64>, r: &[f64]) -> f64 {
    scores.iter().zip(r).map(|(&s, &y)| softplus(s) - y * s).sum::<f64>() / r.len() as f64
}

fn l1(v: &Array1<f64>) -> f64 {
    v.iter().map(|t| t.abs()).sum()
}

/// `-(1/n) sum [R_i s_i - log(1 + exp(s_i))] + zeta |theta|_1` with
/// `s_i = X_i^T theta + intercept`.
pub fn logistic_objective(
    x: ArrayView2<f64>,
    observed: &[bool],
    zeta: f64,
    theta: ArrayView1<f64>,
    intercept: f64,
) -> f64 {
    let scores = x.dot(&theta) + intercept;
    let r = indicator(observed);
    mean_loss(&scores, &r) + zeta * theta.iter().map(|t| t.abs()).sum::<f64>()
}

fn indicator(observed: &[bool]) -> Vec<f64> {
    observed.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect()
}

/// Upper bound on the Lipschitz constant of the mean logistic loss gradient:
/// `||[X, 1]||_op^2 / (4 n)`, with the operator norm from power iteration.
fn lipschitz_bound(x: ArrayView2<f64>, with_intercept: bool) -> f64 {
    let (n, d) = x.dim();
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut c = if with_intercept { 1.0 } else { 0.0 };
    let mut estimate = 0.0;
    for _ in 0..100 {
        let u = x.dot(&v) + c;
        let mut w = x.t().dot(&u);
        let wc = if with_intercept { u.sum() } else { 0.0 };
        let norm = (w.dot(&w) + wc * wc).sqrt();
        if norm == 0.0 {
            break;
        }
        w /= norm;
        let prev = estimate;
        estimate = norm;
        v = w;
        c = wc / norm;
        if (estimate - prev).abs() <= 1e-6 * estimate {
            break;
        }
    }
    // Power iteration approaches the top eigenvalue from below.
    (1.05 * estimate / (4.0 * n as f64)).max(f64::MIN_POSITIVE)
}

struct LogisticSolver<'a> {
    x: ArrayView2<'a, f64>,
    r: Vec<f64>,
    lipschitz: f64,
    cfg: LogisticConfig,
}

impl<'a> LogisticSolver<'a> {
    fn new(x: ArrayView2<'a, f64>, observed: &[bool], cfg: LogisticConfig) -> Self {
        LogisticSolver {
            x,
            r: indicator(observed),
            lipschitz: lipschitz_bound(x, cfg.fit_intercept),
            cfg,
        }
    }

    /// Monotone FISTA with backtracking on `L`.
    fn solve(&self, zeta: f64, warm: Option<(&Array1<f64>, f64)>) -> LogisticFit {
        let n = self.x.nrows() as f64;
        let (mut theta, mut b) = match warm {
            Some((t, b)) => (t.clone(), b),
            None => (Array1::zeros(self.x.ncols()), 0.0),
        };
        let intercept = self.cfg.fit_intercept;
        let mut scores = self.x.dot(&theta) + b;
        let mut objective = mean_loss(&scores, &self.r) + zeta * l1(&theta);

        let mut y_theta = theta.clone();
        let mut y_b = b;
        let mut y_scores = scores.clone();
        let mut t = 1.0f64;
        let mut lip = self.lipschitz;
        let mut iterations = 0;
        let mut converged = false;
        let mut monotone_violations = 0;

        while iterations < self.cfg.max_iter {
            iterations += 1;
            let probs = y_scores.mapv(sigmoid);
            let resid: Array1<f64> = probs.iter().zip(&self.r).map(|(p, r)| p - r).collect();
            let grad = self.x.t().dot(&resid) / n;
            let grad_b = if intercept { resid.sum() / n } else { 0.0 };
            let f_y = mean_loss(&y_scores, &self.r);

            let (z_theta, z_b, z_scores, f_z) = loop {
                let step = 1.0 / lip;
                let z_theta: Array1<f64> = y_theta
                    .iter()
                    .zip(&grad)
                    .map(|(v, g)| soft_threshold(v - step * g, step * zeta))
                    .collect();
                let z_b = if intercept { y_b - step * grad_b } else { 0.0 };
                let z_scores = self.x.dot(&z_theta) + z_b;
                let f_z = mean_loss(&z_scores, &self.r);
                let diff = &z_theta - &y_theta;
                let db = z_b - y_b;
                let model = f_y + grad.dot(&diff) + grad_b * db
                    + 0.5 * lip * (diff.dot(&diff) + db * db);
                if f_z <= model + 1e-12 * (1.0 + f_y.abs()) || lip > 1e12 * self.lipschitz {
                    break (z_theta, z_b, z_scores, f_z);
                }
                lip *= 2.0;
            };

            let gap = (&z_theta - &y_theta)
                .iter()
                .fold((z_b - y_b).abs(), |m, v| m.max(v.abs()))
                * lip;

            let f_z_total = f_z + zeta * l1(&z_theta);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let (prev_theta, prev_b, prev_scores) = (theta.clone(), b, scores.clone());
            if f_z_total <= objective {
                theta = z_theta.clone();
                b = z_b;
                scores = z_scores.clone();
                objective = f_z_total;
            }
            let a = t / t_next;
            let c = (t - 1.0) / t_next;
            y_theta = &theta + &((&z_theta - &theta) * a) + &((&theta - &prev_theta) * c);
            y_b = b + a * (z_b - b) + c * (b - prev_b);
            y_scores = &scores + &((&z_scores - &scores) * a) + &((&scores - &prev_scores) * c);
            t = t_next;

            let now = mean_loss(&scores, &self.r) + zeta * l1(&theta);
            if now > objective + 1e-12 * (1.0 + objective.abs()) {
                monotone_violations += 1;
            }

            if gap < self.cfg.tol {
                converged = true;
                break;
            }
        }

        LogisticFit {
            theta,
            intercept: b,
            objective,
            iterations,
            converged,
            monotone_violations,
        }
    }
}

fn check_inputs(x: ArrayView2<f64>, observed: &[bool], zeta: f64) -> Result<()> {
    check_len("missingness mask", x.nrows(), observed.len())?;
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(DebiasError::invalid("empty covariate matrix"));
    }
    if !(zeta >= 0.0) || !zeta.is_finite() {
        return Err(DebiasError::invalid(format!("zeta must be >= 0, got {zeta}")));
    }
    Ok(())
}

fn single_class(observed: &[bool]) -> Option<f64> {
    let rate = observed.iter().filter(|&&o| o).count() as f64 / observed.len() as f64;
    (rate == 0.0 || rate == 1.0).then_some(rate)
}

/// Lasso-type logistic regression of `R` on `X` at a fixed penalty.
pub fn logistic_lasso_fit(
    x: ArrayView2<f64>,
    observed: &[bool],
    zeta: f64,
    cfg: &LogisticConfig,
) -> Result<PropensityEstimate> {
    cfg.validate()?;
    check_inputs(x, observed, zeta)?;
    if let Some(rate) = single_class(observed) {
        return Ok(PropensityEstimate {
            pi_hat: vec![rate; observed.len()],
            theta_hat: None,
            intercept: None,
            zeta: Some(zeta),
            degenerate: true,
            converged: true,
            fold_seed: None,
        });
    }
    let fit = LogisticSolver::new(x, observed, *cfg).solve(zeta, None);
    Ok(estimate_from_fit(x, &fit, zeta, cfg))
}

fn estimate_from_fit(
    x: ArrayView2<f64>,
    fit: &LogisticFit,
    zeta: f64,
    cfg: &LogisticConfig,
) -> PropensityEstimate {
    PropensityEstimate {
        pi_hat: fit.probabilities(x),
        theta_hat: Some(fit.theta.to_vec()),
        intercept: cfg.fit_intercept.then_some(fit.intercept),
        zeta: Some(zeta),
        degenerate: false,
        converged: fit.converged,
        fold_seed: None,
    }
}

/// `points` log-spaced values on `[0.1 sqrt(log d / n), 300 sqrt(log d / n)]`.
///
/// For `d = 1` the scale `sqrt(log d / n)` vanishes; `log 2` is used instead
/// so the grid stays strictly positive.
pub fn default_zeta_grid(n: usize, d: usize, points: usize) -> Vec<f64> {
    let base = ((d as f64).ln().max(std::f64::consts::LN_2) / n as f64).sqrt();
    let (lo, hi) = ((0.1 * base).ln(), (300.0 * base).ln());
    match points {
        0 => Vec::new(),
        1 => vec![0.1 * base],
        _ => (0..points)
            .map(|k| {
                if k == 0 {
                    0.1 * base
                } else if k + 1 == points {
                    300.0 * base
                } else {
                    (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp()
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZetaSelection {
    pub zeta: f64,
    pub grid: Vec<f64>,
    /// Pooled held-out deviance per grid value.
    pub deviance: Vec<f64>,
}

/// Chooses the logistic penalty by K-fold cross-validation on held-out
/// deviance, folds drawn from a seeded shuffle.
pub fn cv_zeta(
    x: ArrayView2<f64>,
    observed: &[bool],
    grid: &[f64],
    folds: usize,
    seed: u64,
    cfg: &LogisticConfig,
) -> Result<ZetaSelection> {
    if folds < 2 || folds > x.nrows() {
        return Err(DebiasError::invalid(format!(
            "need 2 <= folds <= n, got {folds} folds for n = {}",
            x.nrows()
        )));
    }
    let fold_of = assign_folds(x.nrows(), folds, seed);
    cv_zeta_with_folds(x, observed, grid, &fold_of, cfg)
}

/// Cross-validation with an explicit fold label per observation.
pub fn cv_zeta_with_folds(
    x: ArrayView2<f64>,
    observed: &[bool],
    grid: &[f64],
    fold_of: &[usize],
    cfg: &LogisticConfig,
) -> Result<ZetaSelection> {
    cfg.validate()?;
    check_len("fold labels", x.nrows(), fold_of.len())?;
    check_len("missingness mask", x.nrows(), observed.len())?;
    if grid.is_empty() {
        return Err(DebiasError::invalid("empty zeta grid"));
    }
    if grid.iter().any(|z| !(*z >= 0.0) || !z.is_finite()) {
        return Err(DebiasError::invalid("zeta grid values must be finite and >= 0"));
    }
    if grid.len() == 1 {
        return Ok(ZetaSelection {
            zeta: grid[0],
            grid: grid.to_vec(),
            deviance: vec![f64::NAN],
        });
    }
    let k = fold_of.iter().copied().max().unwrap_or(0) + 1;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    // Largest penalty first so each fit warm-starts from a sparser one.
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let mut deviance = vec![0.0; grid.len()];
    for f in 0..k {
        let (train, held) = split(fold_of, f);
        if held.is_empty() {
            continue;
        }
        let x_train = x.select(Axis(0), &train);
        let r_train: Vec<bool> = train.iter().map(|&i| observed[i]).collect();
        let x_held = x.select(Axis(0), &held);
        let r_held: Vec<bool> = held.iter().map(|&i| observed[i]).collect();

        let constant = single_class(&r_train);
        let solver = LogisticSolver::new(x_train.view(), &r_train, *cfg);
        let mut warm: Option<LogisticFit> = None;
        for &g in &order {
            let probs = match constant {
                Some(rate) => vec![rate; held.len()],
                None => {
                    let fit = solver.solve(grid[g], warm.as_ref().map(|w| (&w.theta, w.intercept)));
                    let p = fit.probabilities(x_held.view());
                    warm = Some(fit);
                    p
                }
            };
            deviance[g] += held_out_deviance(&probs, &r_held);
        }
    }
    let n = x.nrows() as f64;
    for v in deviance.iter_mut() {
        *v /= n;
    }
    let mut ascending: Vec<usize> = (0..grid.len()).collect();
    ascending.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    let sorted: Vec<f64> = ascending.iter().map(|&i| deviance[i]).collect();
    let best = argmin_prefer_last(&sorted, 1e-9)
        .ok_or_else(|| DebiasError::Degenerate("no finite held-out deviance".into()))?;
    Ok(ZetaSelection {
        zeta: grid[ascending[best]],
        grid: grid.to_vec(),
        deviance,
    })
}

/// Summed log-loss with probabilities clipped to `[1e-12, 1 - 1e-12]`.
fn held_out_deviance(probs: &[f64], observed: &[bool]) -> f64 {
    probs
        .iter()
        .zip(observed)
        .map(|(&p, &o)| {
            let p = p.clamp(DEVIANCE_CLIP, 1.0 - DEVIANCE_CLIP);
            if o {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ZetaChoice {
    Fixed { zeta: f64 },
    CrossValidated { folds: usize, points: usize, seed: u64 },
}

/// Lasso-type logistic propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticLasso {
    pub zeta: ZetaChoice,
    pub config: LogisticConfig,
}

impl LogisticLasso {
    /// Five-fold CV over the default 40-point grid, with an intercept.
    pub fn cross_validated(seed: u64) -> Self {
        LogisticLasso {
            zeta: ZetaChoice::CrossValidated {
                folds: 5,
                points: 40,
                seed,
            },
            config: LogisticConfig {
                fit_intercept: true,
                ..LogisticConfig::default()
            },
        }
    }
}

impl PropensityEstimator for LogisticLasso {
    fn fit(&self, x: ArrayView2<f64>, observed: &[bool]) -> Result<PropensityEstimate> {
        match self.zeta {
            ZetaChoice::Fixed { zeta } => logistic_lasso_fit(x, observed, zeta, &self.config),
            ZetaChoice::CrossValidated { folds, points, seed } => {
                check_inputs(x, observed, 0.0)?;
                if single_class(observed).is_some() {
                    return logistic_lasso_fit(x, observed, 0.0, &self.config);
                }
                let grid = default_zeta_grid(x.nrows(), x.ncols(), points);
                let sel = cv_zeta(x, observed, &grid, folds, seed, &self.config)?;
                let mut est = logistic_lasso_fit(x, observed, sel.zeta, &self.config)?;
                est.fold_seed = Some(seed);
                Ok(est)
            }
        }
    }
}

/// Mean absolute difference between two propensity vectors.
pub fn mean_abs_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
