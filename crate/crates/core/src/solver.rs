//! The debiasing program and its dual.
//!
//! The primal problem chooses observation weights `w` minimizing
//! `sum pi_i w_i^2` subject to
//!
//! ```text
//! | x - (1/sqrt(n)) sum_i w_i pi_i X_i |_inf <= gamma / n.
//! ```
//!
//! It is solved through the unconstrained dual
//!
//! ```text
//! D(l) = (1/(4n)) sum_i pi_i (X_i^T l)^2 + x^T l + (gamma/n) |l|_1,
//! ```
//!
//! whose minimizer maps back to `w_i = -X_i^T l / (2 sqrt(n))`. The primal
//! constraint residual at those weights is exactly the gradient of the smooth
//! part of `D`, so coordinate-descent optimality doubles as feasibility.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DebiasError, Result};
use crate::lasso::soft_threshold;
use crate::model::{DebiasSolution, QueryPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    /// Stop once the largest coordinate change of a sweep falls below this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Slack added to `gamma / n` when checking primal feasibility. `None`
    /// means `1e-7 * (1 + |x|_inf)`.
    pub tol_feas: Option<f64>,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            tol: 1e-8,
            max_sweeps: 20_000,
            tol_feas: None,
        }
    }
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(DebiasError::invalid("dual tolerance must be positive"));
        }
        if self.max_sweeps == 0 {
            return Err(DebiasError::invalid("dual max_sweeps must be at least 1"));
        }
        if let Some(t) = self.tol_feas {
            if !(t > 0.0) {
                return Err(DebiasError::invalid("feasibility slack must be positive"));
            }
        }
        Ok(())
    }

    pub fn feasibility_slack(&self, x: &QueryPoint) -> f64 {
        self.tol_feas.unwrap_or(1e-7 * (1.0 + x.sup_norm()))
    }
}

/// `(1/(4n)) sum pi_i (X_i^T l)^2 + x^T l + (gamma/n) |l|_1`.
pub fn dual_objective(
    ell: ArrayView1<f64>,
    x_mat: ArrayView2<f64>,
    pi_hat: &[f64],
    x: &QueryPoint,
    gamma: f64,
) -> f64 {
    let n = x_mat.nrows() as f64;
    let s = x_mat.dot(&ell);
    let quad: f64 = s.iter().zip(pi_hat).map(|(si, p)| p * si * si).sum();
    quad / (4.0 * n) + x.view().dot(&ell) + gamma / n * ell.iter().map(|v| v.abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualFit {
    pub ell: Array1<f64>,
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Coordinates whose curvature is not positive; held at zero.
    pub frozen: Vec<usize>,
    pub monotone_violations: usize,
}

enum Mode {
    /// `G = X^T diag(pi) X / (2n)`, row-major; the solver tracks `G l`.
    Gram(Array2<f64>),
    /// Columns of `X` and of `diag(pi) X / (2n)`, each stored contiguously;
    /// the solver tracks `X l`.
    Residual { cols: Array2<f64>, pcols: Array2<f64> },
}

/// A dual problem with its `gamma`-independent precomputation, so that a
/// grid of penalties can be solved without redoing it.
pub struct DualProblem<'a> {
    x_mat: ArrayView2<'a, f64>,
    pi_hat: &'a [f64],
    query: &'a QueryPoint,
    curvature: Vec<f64>,
    mode: Mode,
}

impl<'a> DualProblem<'a> {
    pub fn new(x_mat: ArrayView2<'a, f64>, pi_hat: &'a [f64], query: &'a QueryPoint) -> Result<Self> {
        let (n, d) = x_mat.dim();
        if n == 0 {
            return Err(DebiasError::invalid("debiasing program needs at least one row"));
        }
        check_len("propensity scores", n, pi_hat.len())?;
        query.check_dim(d)?;
        if pi_hat.iter().any(|p| !p.is_finite()) {
            return Err(DebiasError::invalid("propensity scores must be finite"));
        }
        let half_inv_n = 0.5 / n as f64;
        let pi = ArrayView1::from(pi_hat);
        let weighted = &x_mat * &pi.insert_axis(Axis(1)) * half_inv_n;

        let (curvature, mode) = if n >= d {
            let gram = x_mat.t().dot(&weighted);
            let curvature = gram.diag().to_vec();
            (curvature, Mode::Gram(gram))
        } else {
            let cols = x_mat.t().as_standard_layout().into_owned();
            let pcols = weighted.t().as_standard_layout().into_owned();
            let curvature = cols
                .rows()
                .into_iter()
                .zip(pcols.rows())
                .map(|(c, p)| c.dot(&p))
                .collect();
            (curvature, Mode::Residual { cols, pcols })
        };
        Ok(DualProblem {
            x_mat,
            pi_hat,
            query,
            curvature,
            mode,
        })
    }

    pub fn n(&self) -> usize {
        self.x_mat.nrows()
    }

    pub fn d(&self) -> usize {
        self.x_mat.ncols()
    }

    pub fn objective(&self, ell: ArrayView1<f64>, gamma: f64) -> f64 {
        dual_objective(ell, self.x_mat, self.pi_hat, self.query, gamma)
    }

    /// Cyclic coordinate descent at penalty `gamma`, optionally warm-started.
    pub fn solve(&self, gamma: f64, cfg: &DualConfig, warm_start: Option<ArrayView1<f64>>) -> Result<DualFit> {
        cfg.validate()?;
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(DebiasError::invalid(format!("gamma must be positive, got {gamma}")));
        }
        let d = self.d();
        let thresh = gamma / self.n() as f64;
        let x = self.query.as_slice();
        let frozen: Vec<usize> = (0..d).filter(|&j| !(self.curvature[j] > 0.0)).collect();

        let mut ell = match warm_start {
            Some(w) => {
                check_len("dual warm start", d, w.len())?;
                w.to_owned()
            }
            None => Array1::zeros(d),
        };
        for &j in &frozen {
            ell[j] = 0.0;
        }

        // `track` is G l in Gram mode and X l in residual mode.
        let mut track = match &self.mode {
            Mode::Gram(g) => g.dot(&ell),
            Mode::Residual { cols, .. } => cols.t().dot(&ell),
        };
        let l1 = |ell: &Array1<f64>| ell.iter().map(|v| v.abs()).sum::<f64>();
        let objective_of = |ell: &Array1<f64>, track: &Array1<f64>| -> f64 {
            let quad = match &self.mode {
                Mode::Gram(_) => 0.5 * ell.dot(track),
                Mode::Residual { .. } => {
                    let n = self.n() as f64;
                    track
                        .iter()
                        .zip(self.pi_hat)
                        .map(|(s, p)| p * s * s)
                        .sum::<f64>()
                        / (4.0 * n)
                }
            };
            quad + self.query.view().dot(ell) + thresh * l1(ell)
        };

        let mut objective = objective_of(&ell, &track);
        let mut monotone_violations = 0;
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < cfg.max_sweeps {
            sweeps += 1;
            let mut max_change = 0.0f64;
            for j in 0..d {
                let a = self.curvature[j];
                if !(a > 0.0) {
                    continue;
                }
                let old = ell[j];
                let grad = match &self.mode {
                    Mode::Gram(_) => track[j],
                    Mode::Residual { pcols, .. } => pcols.row(j).dot(&track),
                } + x[j];
                let new = soft_threshold(a * old - grad, thresh) / a;
                let delta = new - old;
                if delta != 0.0 {
                    match &self.mode {
                        Mode::Gram(g) => track.scaled_add(delta, &g.row(j)),
                        Mode::Residual { cols, .. } => track.scaled_add(delta, &cols.row(j)),
                    }
                    ell[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            let next = objective_of(&ell, &track);
            if next > objective + 1e-12 * (1.0 + objective.abs()) {
                monotone_violations += 1;
            }
            objective = next;
            if max_change < cfg.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("dual coordinate descent hit {} sweeps at gamma = {gamma}", cfg.max_sweeps);
        }

        Ok(DualFit {
            ell,
            objective,
            sweeps,
            converged,
            frozen,
            monotone_violations,
        })
    }

    /// Solves at `gamma` and assembles weights and feasibility diagnostics.
    pub fn debias(&self, gamma: f64, cfg: &DualConfig, warm_start: Option<ArrayView1<f64>>) -> Result<DebiasSolution> {
        let fit = self.solve(gamma, cfg, warm_start)?;
        let weights = weights_from_dual(self.x_mat, fit.ell.view());
        let (primal_feasible, constraint_sup_norm) = primal_feasibility(
            &weights,
            self.pi_hat,
            self.x_mat,
            self.query,
            gamma,
            cfg.feasibility_slack(self.query),
        );
        let nonpositive_propensity = self.pi_hat.iter().any(|&p| p <= 0.0);
        if nonpositive_propensity {
            log::warn!("some propensity estimates are <= 0; the dual may not be convex");
        }
        Ok(DebiasSolution {
            ell_hat: fit.ell.to_vec(),
            weights: weights.to_vec(),
            gamma,
            dual_objective: fit.objective,
            primal_feasible,
            constraint_sup_norm,
            converged: fit.converged,
            sweeps: fit.sweeps,
            monotone_violations: fit.monotone_violations,
            frozen: fit.frozen,
            nonpositive_propensity,
        })
    }
}

/// Coordinate-descent minimizer of [`dual_objective`].
pub fn solve_dual_cd(
    x_mat: ArrayView2<f64>,
    pi_hat: &[f64],
    x: &QueryPoint,
    gamma: f64,
    cfg: &DualConfig,
    warm_start: Option<ArrayView1<f64>>,
) -> Result<DualFit> {
    DualProblem::new(x_mat, pi_hat, x)?.solve(gamma, cfg, warm_start)
}

/// Dual solve plus weights and primal diagnostics.
pub fn solve_debias(
    x_mat: ArrayView2<f64>,
    pi_hat: &[f64],
    x: &QueryPoint,
    gamma: f64,
    cfg: &DualConfig,
) -> Result<DebiasSolution> {
    DualProblem::new(x_mat, pi_hat, x)?.debias(gamma, cfg, None)
}

/// `w_i = -X_i^T l / (2 sqrt(n))`.
pub fn weights_from_dual(x_mat: ArrayView2<f64>, ell_hat: ArrayView1<f64>) -> Array1<f64> {
    let scale = -0.5 / (x_mat.nrows() as f64).sqrt();
    x_mat.dot(&ell_hat) * scale
}

/// Sup-norm of `x - (1/sqrt(n)) sum w_i pi_i X_i` and whether it is within
/// `gamma/n + tol_feas`.
pub fn primal_feasibility(
    weights: &Array1<f64>,
    pi_hat: &[f64],
    x_mat: ArrayView2<f64>,
    x: &QueryPoint,
    gamma: f64,
    tol_feas: f64,
) -> (bool, f64) {
    let n = x_mat.nrows() as f64;
    let wp: Array1<f64> = weights.iter().zip(pi_hat).map(|(w, p)| w * p).collect();
    let residual = &x.view() - &(x_mat.t().dot(&wp) / n.sqrt());
    let sup = residual.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (sup <= gamma / n + tol_feas, sup)
}

/// `sum pi_i w_i^2`.
pub fn primal_objective(weights: &[f64], pi_hat: &[f64]) -> f64 {
    weights.iter().zip(pi_hat).map(|(w, p)| p * w * w).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDual {
    pub ell0: Array1<f64>,
    pub gram: Array2<f64>,
}

/// `l0 = -2 gram^{-1} x` by a Cholesky solve.
pub fn population_dual(gram: ArrayView2<f64>, x: &QueryPoint) -> Result<PopulationDual> {
    let d = x.dim();
    check_len("gram rows", d, gram.nrows())?;
    check_len("gram columns", d, gram.ncols())?;
    let m = DMatrix::from_fn(d, d, |i, j| gram[[i, j]]);
    let chol = m.cholesky().ok_or(DebiasError::NotPositiveDefinite)?;
    let sol = chol.solve(&DVector::from_column_slice(x.as_slice()));
    Ok(PopulationDual {
        ell0: sol.iter().map(|v| -2.0 * v).collect(),
        gram: gram.to_owned(),
    })
}

/// The three conditional mean-squared-error terms of `sqrt(n) (m_hat - m0)`
/// given the covariates, for fixed weights and pilot coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseDecomposition {
    /// `sigma^2 sum w_i^2 pi_i`.
    pub var1: f64,
    /// `delta^T [sum w_i^2 pi_i (1 - pi_i) X_i X_i^T] delta`, `delta = beta0 - beta`.
    pub var2: f64,
    /// `([(1/sqrt(n)) sum w_i pi_i X_i - x]^T sqrt(n) delta)^2`.
    pub bias_sq: f64,
}

impl MseDecomposition {
    pub fn total(&self) -> f64 {
        self.var1 + self.var2 + self.bias_sq
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conditional_mse_decomposition(
    weights: &[f64],
    beta: &[f64],
    beta0: &[f64],
    true_pi: &[f64],
    x_mat: ArrayView2<f64>,
    x: &QueryPoint,
    sigma_eps: f64,
) -> Result<MseDecomposition> {
    let (n, d) = x_mat.dim();
    check_len("weights", n, weights.len())?;
    check_len("propensities", n, true_pi.len())?;
    check_len("coefficients", d, beta.len())?;
    check_len("true coefficients", d, beta0.len())?;
    x.check_dim(d)?;
    let delta: Array1<f64> = beta0.iter().zip(beta).map(|(a, b)| a - b).collect();
    let proj = x_mat.dot(&delta);
    let mut var1 = 0.0;
    let mut var2 = 0.0;
    let mut drift = 0.0;
    for i in 0..n {
        let (w, p) = (weights[i], true_pi[i]);
        var1 += w * w * p;
        var2 += w * w * p * (1.0 - p) * proj[i] * proj[i];
        drift += w * p * proj[i];
    }
    let bias = drift - (n as f64).sqrt() * x.view().dot(&delta);
    Ok(MseDecomposition {
        var1: sigma_eps * sigma_eps * var1,
        var2,
        bias_sq: bias * bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn q(v: Vec<f64>) -> QueryPoint {
        QueryPoint::new(v).unwrap()
    }

    fn instance(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<f64>, QueryPoint) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
        let pi = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let query = q((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        (x, pi, query)
    }

    #[test]
    fn objective_examples() {
        let x = array![[1.0]];
        let query = q(vec![1.0]);
        assert_eq!(dual_objective(array![0.0].view(), x.view(), &[1.0], &query, 1.0), 0.0);
        assert_relative_eq!(dual_objective(array![-2.0].view(), x.view(), &[1.0], &query, 1.0), 1.0);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let x = array![[1.0]];
        let cfg = DualConfig::default();
        for &x1 in &[-2.0, -1.0, -0.3, 0.0, 0.25, 1.0, 3.5] {
            for &gamma in &[0.01, 0.3, 1.0, 2.0, 4.0] {
                let query = q(vec![x1]);
                let fit = solve_dual_cd(x.view(), &[1.0], &query, gamma, &cfg, None).unwrap();
                let expect = -2.0 * soft_threshold(x1, gamma);
                assert!((fit.ell[0] - expect).abs() <= 1e-10, "x1={x1} gamma={gamma}");
                if gamma >= x1.abs() {
                    assert_eq!(fit.ell[0], 0.0);
                }
            }
        }
        let query = q(vec![1.0]);
        let fit = solve_dual_cd(x.view(), &[1.0], &query, 0.3, &cfg, None).unwrap();
        assert_relative_eq!(fit.ell[0], -1.4, epsilon = 1e-12);
    }

    #[test]
    fn weights_examples() {
        let x = Array2::from_elem((4, 1), -2.0);
        let w = weights_from_dual(x.view(), array![1.0].view());
        assert!(w.iter().all(|&v| v == 0.5));
        assert!(weights_from_dual(x.view(), array![0.0].view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feasibility_examples() {
        let x = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        let w = Array1::zeros(4);
        let pi = [1.0; 4];
        assert_eq!(primal_feasibility(&w, &pi, x.view(), &q(vec![0.0, 0.0]), 1.0, 1e-7), (true, 0.0));
        assert_eq!(primal_feasibility(&w, &pi, x.view(), &q(vec![1.0, 0.0]), 2.0, 1e-7), (false, 1.0));
    }

    #[test]
    fn large_gamma_gives_zero_weights() {
        let (x, pi, query) = instance(40, 6, 3);
        let gamma = 40.0 * query.sup_norm();
        let sol = solve_debias(x.view(), &pi, &query, gamma, &DualConfig::default()).unwrap();
        assert!(sol.ell_hat.iter().all(|&v| v == 0.0));
        assert!(sol.weights.iter().all(|&v| v == 0.0));
        assert!(sol.primal_feasible);
    }

    #[test]
    fn both_modes_agree() {
        // d > n forces residual mode; the same rows padded to n > d use the Gram.
        let (x, pi, _) = instance(12, 9, 5);
        let wide = x.slice(ndarray::s![..6, ..]).to_owned();
        // A query in the row space keeps the primal feasible (dual bounded).
        let query = q(wide.t().dot(&array![0.3, -0.2, 0.1, 0.5, -0.4, 0.2]).to_vec());
        let cfg = DualConfig::default();
        let a = solve_dual_cd(wide.view(), &pi[..6], &query, 0.4, &cfg, None).unwrap();
        assert!(a.converged);
        // Duplicating every row doubles n, so the same objective needs twice
        // the gamma. The wide quadratic is rank deficient, so compare values.
        let tall = ndarray::concatenate![Axis(0), wide, wide];
        let pi2: Vec<f64> = pi[..6].iter().chain(&pi[..6]).copied().collect();
        let b = solve_dual_cd(tall.view(), &pi2, &query, 0.8, &cfg, None).unwrap();
        assert!(b.converged);
        assert!((a.objective - b.objective).abs() < 1e-9, "{} vs {}", a.objective, b.objective);
    }

    #[test]
    fn beats_population_plug_in() {
        for seed in 0..20 {
            let (x, pi, query) = instance(30, 5, 100 + seed);
            let n = x.nrows() as f64;
            let pi_view = ArrayView1::from(&pi[..]);
            let gram = x.t().dot(&(&x * &pi_view.insert_axis(Axis(1)))) / n;
            let pop = population_dual(gram.view(), &query).unwrap();
            let gamma = 0.3 * n * query.sup_norm();
            let fit = solve_dual_cd(x.view(), &pi, &query, gamma, &DualConfig::default(), None).unwrap();
            let plug = dual_objective(pop.ell0.view(), x.view(), &pi, &query, gamma);
            assert!(fit.objective <= plug + 1e-12);
        }
    }

    #[test]
    fn population_dual_examples() {
        let query = q(vec![1.0, -2.0, 0.5]);
        let eye = Array2::eye(3);
        let pop = population_dual(eye.view(), &query).unwrap();
        assert_eq!(pop.ell0.to_vec(), vec![-2.0, 4.0, -1.0]);
        let pop = population_dual((&eye * 4.0).view(), &query).unwrap();
        assert_eq!(pop.ell0.to_vec(), vec![-0.5, 1.0, -0.25]);
        let not_pd = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            population_dual(not_pd.view(), &q(vec![1.0, 1.0])),
            Err(DebiasError::NotPositiveDefinite)
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = Array2::from_shape_fn((8, 5), |_| rng.sample::<f64, _>(StandardNormal));
            let gram = a.t().dot(&a) + Array2::<f64>::eye(5) * 0.1;
            let query = q((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
            let pop = population_dual(gram.view(), &query).unwrap();
            let resid = gram.dot(&pop.ell0) + &query.view() * 2.0;
            assert!(resid.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn mse_decomposition_examples() {
        let (x, pi, query) = instance(6, 3, 11);
        let w = vec![0.3, -0.1, 0.2, 0.0, 0.5, -0.4];
        let beta = vec![1.0, 0.0, -1.0];
        let m = conditional_mse_decomposition(&w, &beta, &beta, &pi, x.view(), &query, 1.3).unwrap();
        assert_eq!((m.var2, m.bias_sq), (0.0, 0.0));
        assert!(m.var1 > 0.0);

        let beta0 = vec![0.5, 0.2, -1.0];
        let m = conditional_mse_decomposition(&[0.0; 6], &beta, &beta0, &pi, x.view(), &query, 1.3).unwrap();
        assert_eq!((m.var1, m.var2), (0.0, 0.0));
        let shift = (6.0f64).sqrt() * (query.as_slice()[0] * -0.5 + query.as_slice()[1] * 0.2);
        assert_relative_eq!(m.bias_sq, shift * shift, max_relative = 1e-12);
    }

    fn kkt_violation(x: &Array2<f64>, pi: &[f64], query: &QueryPoint, gamma: f64, ell: &Array1<f64>) -> f64 {
        // Returns the worst KKT excess relative to each coordinate's scale.
        let n = x.nrows() as f64;
        let s = x.dot(ell);
        let mut worst = 0.0f64;
        for j in 0..x.ncols() {
            let col = x.column(j);
            let grad: f64 = (0..x.nrows()).map(|i| pi[i] * col[i] * s[i]).sum::<f64>() / (2.0 * n)
                + query.as_slice()[j];
            let scale: f64 = 1.0
                + (0..x.ncols())
                    .map(|k| (0..x.nrows()).map(|i| pi[i] * col[i] * x[[i, k]]).sum::<f64>().abs())
                    .sum::<f64>()
                    / (2.0 * n);
            let excess = if ell[j] != 0.0 {
                (grad + gamma / n * ell[j].signum()).abs()
            } else {
                (grad.abs() - gamma / n).max(0.0)
            };
            worst = worst.max(excess / scale);
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kkt_descent_and_identities(
            n in 2usize..40, d in 1usize..15, seed in any::<u64>(), frac in 0.02f64..1.2
        ) {
            let (x, pi, query) = instance(n, d, seed);
            let gamma = frac * n as f64 * query.sup_norm().max(1e-3);
            let cfg = DualConfig::default();
            let sol = solve_debias(x.view(), &pi, &query, gamma, &cfg).unwrap();
            prop_assert_eq!(sol.monotone_violations, 0);
            if sol.converged {
                let ell = Array1::from(sol.ell_hat.clone());
                prop_assert!(kkt_violation(&x, &pi, &query, gamma, &ell) <= 10.0 * cfg.tol);
                prop_assert!(sol.primal_feasible, "sup {} vs {}", sol.constraint_sup_norm, gamma / n as f64);
                // Variance identity and strong duality (primal = -dual at optimum).
                let primal = primal_objective(&sol.weights, &pi);
                let s = x.dot(&ell);
                let quad: f64 = s.iter().zip(&pi).map(|(v, p)| p * v * v).sum::<f64>() / (4.0 * n as f64);
                prop_assert!((primal - quad).abs() <= 1e-12 * (1.0 + quad));
            }
        }
    }

    #[test]
    fn ell_norm_shrinks_with_gamma() {
        for seed in 0..5 {
            let (x, pi, query) = instance(50, 10, 40 + seed);
            let problem = DualProblem::new(x.view(), &pi, &query).unwrap();
            let cfg = DualConfig { tol: 1e-12, ..DualConfig::default() };
            let top = 50.0 * query.sup_norm();
            let mut prev = 0.0;
            let mut warm: Option<Array1<f64>> = None;
            for k in (1..=40).rev() {
                let gamma = top * k as f64 / 40.0;
                let fit = problem.solve(gamma, &cfg, warm.as_ref().map(|w| w.view())).unwrap();
                let norm: f64 = fit.ell.iter().map(|v| v.abs()).sum();
                assert!(norm >= prev - 1e-8 * (1.0 + prev), "seed {seed} k {k}: {norm} < {prev}");
                prev = norm;
                warm = Some(fit.ell);
            }
        }
    }

    #[test]
    fn zero_curvature_coordinates_are_frozen() {
        let mut x = Array2::from_shape_fn((10, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        x.column_mut(1).fill(0.0);
        let query = q(vec![0.5, 1.0, -0.5]);
        let sol = solve_debias(x.view(), &[0.8; 10], &query, 1.0, &DualConfig::default()).unwrap();
        assert_eq!(sol.frozen, vec![1]);
        assert_eq!(sol.ell_hat[1], 0.0);
        assert!(!sol.primal_feasible);
    }

    #[test]
    fn negative_propensity_is_flagged() {
        let (x, mut pi, query) = instance(20, 3, 8);
        pi[0] = -0.1;
        let sol = solve_debias(x.view(), &pi, &query, 5.0, &DualConfig::default()).unwrap();
        assert!(sol.nonpositive_propensity);
    }

    #[test]
    fn infeasible_wide_problem_does_not_converge() {
        // x has a component along the null direction (1, -1, 0) larger than
        // gamma/n permits, so the dual decreases without bound.
        let x = array![[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let query = q(vec![1.0, 0.0, 0.0]);
        let cfg = DualConfig { max_sweeps: 500, ..DualConfig::default() };
        let sol = solve_debias(x.view(), &[1.0, 1.0], &query, 0.5, &cfg).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.monotone_violations, 0);
        assert!(sol.dual_objective < -100.0);
    }

    #[test]
    fn sweep_limit_is_reported() {
        let (x, pi, query) = instance(30, 8, 2);
        let cfg = DualConfig { max_sweeps: 1, ..DualConfig::default() };
        let fit = solve_dual_cd(x.view(), &pi, &query, 0.5, &cfg, None).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.sweeps, 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, pi, query) = instance(10, 3, 1);
        let cfg = DualConfig::default();
        assert!(solve_dual_cd(x.view(), &pi, &query, 0.0, &cfg, None).is_err());
        assert!(solve_dual_cd(x.view(), &pi[..9], &query, 1.0, &cfg, None).is_err());
        assert!(solve_dual_cd(x.view(), &pi, &q(vec![1.0]), 1.0, &cfg, None).is_err());
    }
}
