//! Domain types shared by every stage of the inference pipeline.
//!
//! All types validate their invariants on construction and are immutable
//! afterwards, so they can be shared freely across worker threads.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{check_len, DebiasError, Result};

/// A sample of `(Y_i, R_i, X_i)` triples.
///
/// Outcomes of rows with `R_i = 0` are unobserved and may be `NaN`; they are
/// never read by any estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcomes: Vec<f64>,
    observed: Vec<bool>,
    covariates: Array2<f64>,
}

impl Dataset {
    pub fn new(outcomes: Vec<f64>, observed: Vec<bool>, covariates: Array2<f64>) -> Result<Self> {
        let (n, d) = covariates.dim();
        if n == 0 || d == 0 {
            return Err(DebiasError::invalid(format!(
                "covariate matrix must be non-empty, got {n}x{d}"
            )));
        }
        check_len("outcomes", n, outcomes.len())?;
        check_len("missingness mask", n, observed.len())?;
        if !observed.iter().any(|&r| r) {
            return Err(DebiasError::invalid("no complete cases (every outcome is missing)"));
        }
        if let Some((idx, _)) = covariates.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DebiasError::invalid(format!(
                "non-finite covariate at row {}, column {}",
                idx.0 + 1,
                idx.1 + 1
            )));
        }
        if let Some(i) = (0..n).find(|&i| observed[i] && !outcomes[i].is_finite()) {
            return Err(DebiasError::invalid(format!(
                "row {} is marked observed but its outcome is not finite",
                i + 1
            )));
        }
        Ok(Dataset {
            outcomes,
            observed,
            covariates,
        })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn d(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }

    pub fn n_complete(&self) -> usize {
        self.observed.iter().filter(|&&r| r).count()
    }

    /// Fraction of rows whose outcome is missing.
    pub fn missing_rate(&self) -> f64 {
        1.0 - self.n_complete() as f64 / self.n() as f64
    }

    /// Rows and outcomes with `R_i = 1`, in original order.
    pub fn complete_case_view(&self) -> (Array2<f64>, Array1<f64>) {
        let rows: Vec<usize> = (0..self.n()).filter(|&i| self.observed[i]).collect();
        let x = self.covariates.select(Axis(0), &rows);
        let y = rows.iter().map(|&i| self.outcomes[i]).collect();
        (x, y)
    }

    /// Divides every column by its root mean square. Returns the rescaled
    /// dataset and the scaling needed to map query points into the new
    /// coordinates. Columns that are identically zero are left unscaled.
    pub fn standardize_columns(&self) -> (Dataset, ColumnScaling) {
        let n = self.n() as f64;
        let scales: Vec<f64> = self
            .covariates
            .axis_iter(Axis(1))
            .map(|col| {
                let rms = (col.dot(&col) / n).sqrt();
                if rms > 0.0 {
                    rms
                } else {
                    1.0
                }
            })
            .collect();
        let mut x = self.covariates.clone();
        for (mut col, &s) in x.axis_iter_mut(Axis(1)).zip(&scales) {
            col /= s;
        }
        let data = Dataset {
            outcomes: self.outcomes.clone(),
            observed: self.observed.clone(),
            covariates: x,
        };
        (data, ColumnScaling { scales })
    }
}

/// Per-column scale factors produced by [`Dataset::standardize_columns`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScaling {
    pub scales: Vec<f64>,
}

impl ColumnScaling {
    /// Maps a query point into standardized coordinates; `x^T beta` is
    /// preserved when `beta` is mapped with [`ColumnScaling::restore_coefficients`].
    pub fn apply_query(&self, x: &QueryPoint) -> QueryPoint {
        QueryPoint(
            x.0.iter()
                .zip(&self.scales)
                .map(|(v, s)| v / s)
                .collect(),
        )
    }

    pub fn restore_coefficients(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter().zip(&self.scales).map(|(b, s)| b / s).collect()
    }
}

/// The covariate vector at which `m_0(x) = x^T beta_0` is inferred.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct QueryPoint(Vec<f64>);

impl QueryPoint {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DebiasError::invalid("query point must have at least one entry"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DebiasError::invalid("query point has non-finite entries"));
        }
        Ok(QueryPoint(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[..])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        check_len("query point", d, self.dim())
    }
}

/// Lasso pilot estimate and the noise level fitted alongside it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PilotFit {
    pub beta_hat: Vec<f64>,
    pub sigma_hat: f64,
    /// Penalty of the final Lasso step, on the `(1/n) sum R_i (Y_i - X_i^T b)^2 + lambda |b|_1` scale.
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The noise estimate hit its lower floor (exact interpolation).
    pub sigma_floored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityEstimate {
    pub pi_hat: Vec<f64>,
    pub theta_hat: Option<Vec<f64>>,
    pub intercept: Option<f64>,
    pub zeta: Option<f64>,
    /// Only one class was present in the mask; `pi_hat` is the class rate.
    pub degenerate: bool,
    pub converged: bool,
    /// Seed of the fold shuffle when the penalty was cross-validated.
    pub fold_seed: Option<u64>,
}

impl PropensityEstimate {
    pub(crate) fn from_probs(pi_hat: Vec<f64>) -> Self {
        PropensityEstimate {
            pi_hat,
            theta_hat: None,
            intercept: None,
            zeta: None,
            degenerate: false,
            converged: true,
            fold_seed: None,
        }
    }
}

/// Solution of the debiasing program at a single `gamma`.
///
/// The weights are always derived from `ell_hat` through
/// `w_i = -X_i^T ell / (2 sqrt(n))`; they are never solved for separately.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DebiasSolution {
    pub ell_hat: Vec<f64>,
    pub weights: Vec<f64>,
    pub gamma: f64,
    pub dual_objective: f64,
    pub primal_feasible: bool,
    pub constraint_sup_norm: f64,
    pub converged: bool,
    pub sweeps: usize,
    pub monotone_violations: usize,
    /// Coordinates with zero curvature, frozen at zero.
    pub frozen: Vec<usize>,
    /// Some supplied propensity estimate was `<= 0`.
    pub nonpositive_propensity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    pub m_hat: f64,
    pub variance_hat: f64,
    pub sigma_used: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
}

impl InferenceResult {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_upper - self.ci_lower)
    }

    pub fn length(&self) -> f64 {
        self.ci_upper - self.ci_lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

/// `x^T beta`.
pub fn regression_value(x: &QueryPoint, beta: &[f64]) -> Result<f64> {
    check_len("coefficient vector", x.dim(), beta.len())?;
    Ok(x.as_slice().iter().zip(beta).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Dataset {
        Dataset::new(
            vec![1.0, 2.0, 3.0],
            vec![true, false, true],
            array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]],
        )
        .unwrap()
    }

    #[test]
    fn complete_case_view_filters_in_order() {
        let (x, y) = toy().complete_case_view();
        assert_eq!(x, array![[1.0, 10.0], [3.0, 30.0]]);
        assert_eq!(y, array![1.0, 3.0]);
    }

    #[test]
    fn complete_case_view_all_observed_is_identity() {
        let x = array![[1.0], [2.0]];
        let data = Dataset::new(vec![5.0, 6.0], vec![true, true], x.clone()).unwrap();
        let (xc, yc) = data.complete_case_view();
        assert_eq!(xc, x);
        assert_eq!(yc, array![5.0, 6.0]);
    }

    #[test]
    fn complete_case_view_single_survivor() {
        let data = Dataset::new(
            vec![f64::NAN, 4.0],
            vec![false, true],
            array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
        )
        .unwrap();
        let (xc, yc) = data.complete_case_view();
        assert_eq!(xc, array![[4.0, 5.0, 6.0]]);
        assert_eq!(yc, array![4.0]);
    }

    #[test]
    fn reexpansion_reproduces_masked_products() {
        let data = toy();
        let (xc, yc) = data.complete_case_view();
        let mut k = 0;
        for i in 0..data.n() {
            let r = if data.observed()[i] { 1.0 } else { 0.0 };
            if data.observed()[i] {
                assert_eq!(yc[k], r * data.outcomes()[i]);
                assert_eq!(xc.row(k), data.covariates().row(i));
                k += 1;
            }
        }
        assert_eq!(k, xc.nrows());
    }

    #[test]
    fn rejects_invalid_datasets() {
        assert!(Dataset::new(vec![1.0], vec![false], array![[1.0]]).is_err());
        assert!(Dataset::new(vec![1.0, 2.0], vec![true], array![[1.0], [2.0]]).is_err());
        assert!(Dataset::new(vec![1.0], vec![true], array![[f64::NAN]]).is_err());
        assert!(Dataset::new(vec![f64::NAN], vec![true], array![[1.0]]).is_err());
        assert!(Dataset::new(vec![], vec![], Array2::zeros((0, 2))).is_err());
        assert!(QueryPoint::new(vec![]).is_err());
        assert!(QueryPoint::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn regression_value_examples() {
        let d = 10;
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        let mut beta = vec![0.0; d];
        beta[0] = 5f64.sqrt();
        beta[1] = 5f64.sqrt();
        let x = QueryPoint::new(e1).unwrap();
        assert_eq!(regression_value(&x, &beta).unwrap(), 5f64.sqrt());

        let zero = QueryPoint::new(vec![0.0; d]).unwrap();
        assert_eq!(regression_value(&zero, &beta).unwrap(), 0.0);

        let x = QueryPoint::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(regression_value(&x, &[2.0, -2.0]).unwrap(), 0.0);
        assert!(regression_value(&x, &[1.0]).is_err());
    }

    #[test]
    fn standardization_preserves_regression_value() {
        let data = toy();
        let (scaled, scaling) = data.standardize_columns();
        let x = QueryPoint::new(vec![0.5, -1.0]).unwrap();
        let beta_scaled = [0.3, 0.7];
        let beta = scaling.restore_coefficients(&beta_scaled);
        let a = regression_value(&scaling.apply_query(&x), &beta_scaled).unwrap();
        let b = regression_value(&x, &beta).unwrap();
        assert!((a - b).abs() < 1e-12);
        for col in scaled.covariates().axis_iter(Axis(1)) {
            assert!((col.dot(&col) / 3.0 - 1.0).abs() < 1e-12);
        }
    }
}
