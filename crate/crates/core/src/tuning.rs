//! Cross-validated choice of the debiasing penalty `gamma`.
//!
//! Every fold refits the dual program on its training rows over the whole
//! grid, from the largest `gamma` down with warm starts, and scores the fit
//! by the smooth part of the dual objective on the held-out rows (see
//! [`HeldOutRisk`]). Three rules
//! then read a penalty off the resulting curve; see [`GammaRule`].

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DebiasError, Result};
use crate::folds::{argmin_prefer_last, assign_folds, split};
use crate::model::QueryPoint;
use crate::solver::{dual_objective, DualConfig, DualProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GammaRule {
    /// Minimizer of the mean held-out risk.
    #[serde(rename = "min-cv")]
    MinCv,
    /// The largest `gamma` below the min-CV choice whose mean risk exceeds
    /// the minimum by at least one standard error.
    #[serde(rename = "1se")]
    OneSe,
    /// The smallest `gamma` whose weights are primal-feasible on every fold.
    #[serde(rename = "min-feas")]
    MinFeas,
}

impl GammaRule {
    pub const ALL: [GammaRule; 3] = [GammaRule::MinCv, GammaRule::OneSe, GammaRule::MinFeas];

    pub fn as_str(self) -> &'static str {
        match self {
            GammaRule::MinCv => "min-cv",
            GammaRule::OneSe => "1se",
            GammaRule::MinFeas => "min-feas",
        }
    }
}

impl fmt::Display for GammaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GammaRule {
    type Err = DebiasError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min-cv" | "mincv" => Ok(GammaRule::MinCv),
            "1se" | "one-se" => Ok(GammaRule::OneSe),
            "min-feas" | "minfeas" => Ok(GammaRule::MinFeas),
            other => Err(DebiasError::invalid(format!(
                "unknown gamma rule {other:?} (expected min-cv, 1se or min-feas)"
            ))),
        }
    }
}

/// `points` equally spaced values on `(0, n |x|_inf]`.
///
/// The spacing is `h = n |x|_inf / (points - 1)`; the zero endpoint is
/// replaced by `h / 2`, so the grid is `h/2, h, 2h, ..., n |x|_inf`.
pub fn gamma_grid(n: usize, x: &QueryPoint, points: usize) -> Result<Vec<f64>> {
    let top = n as f64 * x.sup_norm();
    if !(top > 0.0) {
        return Err(DebiasError::invalid("query point is zero; gamma grid is empty"));
    }
    match points {
        0 => Err(DebiasError::invalid("gamma grid needs at least one point")),
        1 => Ok(vec![top]),
        _ => {
            let h = top / (points - 1) as f64;
            let mut grid: Vec<f64> = (0..points).map(|k| k as f64 * h).collect();
            grid[0] = 0.5 * h;
            grid[points - 1] = top;
            Ok(grid)
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(DebiasError::invalid("gamma grid is empty"));
    }
    if grid.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(DebiasError::invalid("gamma grid values must be positive and finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DebiasError::invalid("gamma grid must be strictly increasing"));
    }
    Ok(())
}

/// How a training-fold solution is scored on its held-out rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeldOutRisk {
    /// `(1/(4n')) sum pi_i (X_i^T l)^2 + x^T l` over the `n'` held-out rows.
    Unpenalized,
    /// The same plus `(gamma/n') |l|_1`. The penalty grows with `gamma`
    /// faster than the fit improves, so this tends to select the largest
    /// `gamma` with `l = 0`.
    Penalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    /// Grid size when `grid` is not supplied.
    pub points: usize,
    /// Explicit ascending grid, overriding `points`.
    pub grid: Option<Vec<f64>>,
    pub seed: u64,
    pub dual: DualConfig,
    pub held_out_risk: HeldOutRisk,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            points: 41,
            grid: None,
            seed: 0,
            dual: DualConfig::default(),
            held_out_risk: HeldOutRisk::Unpenalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChosenGammas {
    pub min_cv: f64,
    pub one_se: f64,
    /// `None` when no grid value is feasible on every fold.
    pub min_feas: Option<f64>,
}

/// Conventions the selection depends on, carried along with the output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvConventions {
    pub held_out_risk: HeldOutRisk,
    pub one_se_direction: &'static str,
    pub training_feasibility: &'static str,
}

impl CvConventions {
    fn new(held_out_risk: HeldOutRisk) -> Self {
        CvConventions {
            held_out_risk,
            one_se_direction: "largest gamma below min-cv with risk >= min + 1 se",
            training_feasibility: "converged and |residual|_inf <= gamma/n_train + tol_feas",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaSelection {
    pub grid: Vec<f64>,
    pub cv_mean: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub feasible_all_folds: Vec<bool>,
    pub converged_all_folds: Vec<bool>,
    pub chosen: ChosenGammas,
    /// No grid point met the 1SE condition, so 1SE fell back to min-CV.
    pub one_se_fallback: bool,
    pub folds: usize,
    pub seed: u64,
    pub monotone_violations: usize,
    pub conventions: CvConventions,
}

impl GammaSelection {
    pub fn select(&self, rule: GammaRule) -> Result<f64> {
        select(self, rule)
    }
}

/// The penalty `rule` picked; min-feas without a feasible point is an error.
pub fn select(selection: &GammaSelection, rule: GammaRule) -> Result<f64> {
    match rule {
        GammaRule::MinCv => Ok(selection.chosen.min_cv),
        GammaRule::OneSe => Ok(selection.chosen.one_se),
        GammaRule::MinFeas => selection.chosen.min_feas.ok_or(DebiasError::InfeasibleEverywhere),
    }
}

struct FoldCurve {
    risk: Vec<f64>,
    feasible: Vec<bool>,
    converged: Vec<bool>,
    monotone_violations: usize,
}

fn fold_curve(
    x_mat: ArrayView2<f64>,
    pi_hat: &[f64],
    query: &QueryPoint,
    grid: &[f64],
    train: &[usize],
    held: &[usize],
    cfg: &DualConfig,
    scoring: HeldOutRisk,
) -> Result<FoldCurve> {
    let x_train = x_mat.select(Axis(0), train);
    let pi_train: Vec<f64> = train.iter().map(|&i| pi_hat[i]).collect();
    let x_held = x_mat.select(Axis(0), held);
    let pi_held: Vec<f64> = held.iter().map(|&i| pi_hat[i]).collect();
    let problem = DualProblem::new(x_train.view(), &pi_train, query)?;

    let k = grid.len();
    let mut curve = FoldCurve {
        risk: vec![f64::NAN; k],
        feasible: vec![false; k],
        converged: vec![false; k],
        monotone_violations: 0,
    };
    let mut warm: Option<Array1<f64>> = None;
    for g in (0..k).rev() {
        let sol = problem.debias(grid[g], cfg, warm.as_ref().map(|w| w.view()))?;
        let ell = Array1::from(sol.ell_hat);
        let penalty = match scoring {
            HeldOutRisk::Unpenalized => 0.0,
            HeldOutRisk::Penalized => grid[g],
        };
        let risk = dual_objective(ell.view(), x_held.view(), &pi_held, query, penalty);
        curve.risk[g] = if risk.is_finite() { risk } else { f64::INFINITY };
        curve.feasible[g] = sol.converged && sol.primal_feasible;
        curve.converged[g] = sol.converged;
        curve.monotone_violations += sol.monotone_violations;
        // A diverging solve is a poor start for the next penalty.
        warm = if sol.converged { Some(ell) } else { None };
    }
    Ok(curve)
}

/// Reads the three rule choices off a CV curve; the flag reports a 1SE
/// fallback to min-CV.
fn apply_rules(grid: &[f64], cv_mean: &[f64], cv_se: &[f64], feasible: &[bool]) -> Result<(ChosenGammas, bool)> {
    let i_min = argmin_prefer_last(cv_mean, 1e-12)
        .ok_or_else(|| DebiasError::Degenerate("held-out risk is not finite anywhere on the grid".into()))?;
    let cutoff = cv_mean[i_min] + cv_se[i_min];
    let i_one_se = (0..i_min).rev().find(|&g| cv_mean[g] >= cutoff);
    if i_one_se.is_none() {
        log::debug!("1SE rule found no grid point; falling back to min-CV");
    }
    let chosen = ChosenGammas {
        min_cv: grid[i_min],
        one_se: grid[i_one_se.unwrap_or(i_min)],
        min_feas: feasible.iter().position(|&f| f).map(|g| grid[g]),
    };
    Ok((chosen, i_one_se.is_none()))
}

/// K-fold cross-validation of the dual program over a `gamma` grid.
pub fn cv_gamma(
    x_mat: ArrayView2<f64>,
    pi_hat: &[f64],
    query: &QueryPoint,
    cfg: &CvConfig,
) -> Result<GammaSelection> {
    let (n, d) = x_mat.dim();
    check_len("propensity scores", n, pi_hat.len())?;
    query.check_dim(d)?;
    cfg.dual.validate()?;
    if cfg.folds < 2 {
        return Err(DebiasError::invalid("cross-validation needs at least 2 folds"));
    }
    if n < cfg.folds {
        return Err(DebiasError::invalid(format!(
            "{n} rows cannot be split into {} folds",
            cfg.folds
        )));
    }
    let grid = match &cfg.grid {
        Some(g) => g.clone(),
        None => gamma_grid(n, query, cfg.points)?,
    };
    check_grid(&grid)?;

    let fold_of = assign_folds(n, cfg.folds, cfg.seed);
    let curves: Vec<FoldCurve> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let (train, held) = split(&fold_of, f);
            fold_curve(x_mat, pi_hat, query, &grid, &train, &held, &cfg.dual, cfg.held_out_risk)
        })
        .collect::<Result<_>>()?;

    let k = grid.len();
    let folds = cfg.folds as f64;
    let mut cv_mean = vec![0.0; k];
    let mut cv_se = vec![0.0; k];
    for g in 0..k {
        let mean = curves.iter().map(|c| c.risk[g]).sum::<f64>() / folds;
        let var = curves.iter().map(|c| (c.risk[g] - mean).powi(2)).sum::<f64>() / (folds - 1.0);
        cv_mean[g] = mean;
        cv_se[g] = (var / folds).sqrt();
    }
    let feasible_all_folds: Vec<bool> = (0..k).map(|g| curves.iter().all(|c| c.feasible[g])).collect();
    let converged_all_folds: Vec<bool> = (0..k).map(|g| curves.iter().all(|c| c.converged[g])).collect();
    let monotone_violations = curves.iter().map(|c| c.monotone_violations).sum();

    let (chosen, one_se_fallback) = apply_rules(&grid, &cv_mean, &cv_se, &feasible_all_folds)?;

    Ok(GammaSelection {
        chosen,
        one_se_fallback,
        grid,
        cv_mean,
        cv_se,
        feasible_all_folds,
        converged_all_folds,
        folds: cfg.folds,
        seed: cfg.seed,
        monotone_violations,
        conventions: CvConventions::new(cfg.held_out_risk),
    })
}
