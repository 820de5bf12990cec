//! Simulation designs and the Monte Carlo harness.
//!
//! Covariates are `N(0, Sigma)` rows, outcomes `Y = X^T beta0 + eps`, and
//! observation indicators come from one of the missingness mechanisms below.
//! Replication `r` of a design draws from the ChaCha8 stream `r` of the
//! design seed, so any replication can be regenerated on its own and runs may
//! be split across threads without changing the output.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{DebiasError, Result};
use crate::inference::{run_pipeline, run_pipeline_with, PipelineConfig};
use crate::model::{Dataset, QueryPoint};
use crate::propensity::OraclePropensity;
use crate::stats::{mean, qq_points};

macro_rules! kebab_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = DebiasError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(DebiasError::invalid(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of: ", $($text, " "),+),
                        other
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    CirculantSymmetric,
    ToeplitzAr,
    Identity,
}

kebab_enum!(CovarianceKind {
    CirculantSymmetric => "circulant-symmetric",
    ToeplitzAr => "toeplitz-ar",
    Identity => "identity",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaDesign {
    Sparse,
    Dense,
    PseudoDense,
}

kebab_enum!(BetaDesign {
    Sparse => "sparse",
    Dense => "dense",
    PseudoDense => "pseudo-dense",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryDesign {
    X1,
    X2,
    X3,
    X4,
}

kebab_enum!(QueryDesign {
    X1 => "x1",
    X2 => "x2",
    X3 => "x3",
    X4 => "x4",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    Laplace,
    StudentT2,
}

kebab_enum!(NoiseKind {
    Gaussian => "gaussian",
    Laplace => "laplace",
    StudentT2 => "student-t2",
});

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Missingness {
    /// `P(R = 1 | X) = 1 / (1 + exp(-1 + X_7 - X_8))`.
    MarLogistic,
    /// `P(R = 1 | X) = Phi(-4 + sum of the degree-2 expansion of X_1..X_8)`.
    MarProbitQuadratic,
    /// `P(R = 1) = p`.
    Mcar { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub n: usize,
    pub d: usize,
    pub covariance: CovarianceKind,
    pub beta: BetaDesign,
    pub query: QueryDesign,
    pub noise: NoiseKind,
    pub missingness: Missingness,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SimDesign {
    /// The desk-scale design: `n = 200`, `d = 50`, circulant covariance,
    /// sparse coefficients, `x1`, Gaussian noise, logistic MAR.
    fn default() -> Self {
        SimDesign {
            n: 200,
            d: 50,
            covariance: CovarianceKind::CirculantSymmetric,
            beta: BetaDesign::Sparse,
            query: QueryDesign::X1,
            noise: NoiseKind::Gaussian,
            missingness: Missingness::MarLogistic,
            replications: 300,
            seed: 0,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.d == 0 {
            return Err(DebiasError::invalid("designs need n >= 2 and d >= 1"));
        }
        if self.replications == 0 {
            return Err(DebiasError::invalid("replications must be at least 1"));
        }
        match self.query {
            QueryDesign::X2 if self.d < 8 => {
                return Err(DebiasError::invalid("query x2 needs d >= 8"));
            }
            QueryDesign::X3 if self.d < 100 => {
                return Err(DebiasError::invalid(format!(
                    "query x3 sets coordinate 100 and needs d >= 100, got d = {}",
                    self.d
                )));
            }
            _ => {}
        }
        match self.missingness {
            Missingness::MarLogistic | Missingness::MarProbitQuadratic if self.d < 8 => {
                Err(DebiasError::invalid("the MAR mechanisms use X_1..X_8 and need d >= 8"))
            }
            Missingness::Mcar { p } if !(p > 0.0 && p <= 1.0) => {
                Err(DebiasError::invalid(format!("MCAR observation probability must lie in (0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }
}

/// Unit diagonal, `0.1` on the five cyclic neighbours either side.
pub fn cov_circulant_symmetric(d: usize) -> Array2<f64> {
    let mut sigma = Array2::eye(d);
    for j in 0..d {
        for k in j + 1..d {
            let gap = k - j;
            if gap <= 5 || gap >= d.saturating_sub(5) {
                sigma[[j, k]] = 0.1;
                sigma[[k, j]] = 0.1;
            }
        }
    }
    sigma
}

/// `Sigma_jk = 0.9^|j - k|`.
pub fn cov_toeplitz_ar(d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(j, k)| 0.9f64.powi(j.abs_diff(k) as i32))
}

pub fn covariance(kind: CovarianceKind, d: usize) -> Array2<f64> {
    match kind {
        CovarianceKind::CirculantSymmetric => cov_circulant_symmetric(d),
        CovarianceKind::ToeplitzAr => cov_toeplitz_ar(d),
        CovarianceKind::Identity => Array2::eye(d),
    }
}

/// Lower Cholesky factor, or an error when the matrix is not positive definite.
pub fn cholesky_factor(sigma: &Array2<f64>) -> Result<Array2<f64>> {
    let d = sigma.nrows();
    let m = DMatrix::from_fn(d, d, |i, j| sigma[[i, j]]);
    let l = m.cholesky().ok_or(DebiasError::NotPositiveDefinite)?.unpack();
    Ok(Array2::from_shape_fn((d, d), |(i, j)| l[(i, j)]))
}

/// Sparse: `sqrt(5)` on the first five coordinates. Dense and pseudo-dense:
/// `1/sqrt(k)` and `1/k` profiles scaled to Euclidean norm 5.
pub fn beta_design(kind: BetaDesign, d: usize) -> Vec<f64> {
    let profile: Vec<f64> = match kind {
        BetaDesign::Sparse => return (0..d).map(|k| if k < 5 { 5f64.sqrt() } else { 0.0 }).collect(),
        BetaDesign::Dense => (1..=d).map(|k| 1.0 / (k as f64).sqrt()).collect(),
        BetaDesign::PseudoDense => (1..=d).map(|k| 1.0 / k as f64).collect(),
    };
    let norm = profile.iter().map(|v| v * v).sum::<f64>().sqrt();
    profile.iter().map(|v| 5.0 * v / norm).collect()
}

/// The four query points. `x4` decays like `1/k` under the Toeplitz
/// covariance and like `1/k^2` otherwise.
pub fn query_design(kind: QueryDesign, d: usize, covariance: CovarianceKind) -> Result<QueryPoint> {
    let mut x = vec![0.0; d];
    match kind {
        QueryDesign::X1 => {
            if d == 0 {
                return Err(DebiasError::invalid("query x1 needs d >= 1"));
            }
            x[0] = 1.0;
        }
        QueryDesign::X2 => {
            if d < 8 {
                return Err(DebiasError::invalid("query x2 needs d >= 8"));
            }
            for (k, v) in [(0, 1.0), (1, 0.5), (2, 0.25), (6, 0.5), (7, 0.125)] {
                x[k] = v;
            }
        }
        QueryDesign::X3 => {
            if d < 100 {
                return Err(DebiasError::invalid(format!("query x3 needs d >= 100, got d = {d}")));
            }
            x[99] = 1.0;
        }
        QueryDesign::X4 => {
            for (k, v) in x.iter_mut().enumerate() {
                let k = (k + 1) as f64;
                *v = match covariance {
                    CovarianceKind::ToeplitzAr => 1.0 / k,
                    _ => 1.0 / (k * k),
                };
            }
        }
    }
    QueryPoint::new(x)
}

pub fn mar_logistic_probability(row: &[f64]) -> f64 {
    1.0 / (1.0 + (-1.0 + row[6] - row[7]).exp())
}

/// Linear, squared and pairwise-product terms of `X_1..X_8` (44 features).
pub fn quadratic_features(row: &[f64]) -> Vec<f64> {
    let z = &row[..8];
    let mut out = Vec::with_capacity(44);
    out.extend_from_slice(z);
    for j in 0..8 {
        for k in j..8 {
            out.push(z[j] * z[k]);
        }
    }
    out
}

pub fn mar_probit_quadratic(row: &[f64]) -> f64 {
    let s: f64 = quadratic_features(row).iter().sum();
    Normal::standard().cdf(-4.0 + s)
}

/// Unit-variance Gaussian or Laplace noise, or Student t with 2 degrees of
/// freedom.
pub fn noise_sample<R: Rng + ?Sized>(kind: NoiseKind, rng: &mut R) -> f64 {
    match kind {
        NoiseKind::Gaussian => rng.sample(StandardNormal),
        NoiseKind::Laplace => {
            let u: f64 = rng.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln() / 2f64.sqrt()
        }
        NoiseKind::StudentT2 => {
            // chi^2_2 / 2 is a unit exponential.
            let z: f64 = rng.sample(StandardNormal);
            let e = -(1.0 - rng.random::<f64>()).ln();
            z / e.sqrt()
        }
    }
}

/// One simulated data set together with the truths it was drawn from.
#[derive(Debug, Clone)]
pub struct Replication {
    pub data: Dataset,
    pub m0: f64,
    pub true_pi: Vec<f64>,
    pub beta0: Vec<f64>,
    pub query: QueryPoint,
    /// Seed handed to the pipeline for this replication's fold splits.
    pub pipeline_seed: u64,
}

/// A design with its covariance factor and truths precomputed.
pub struct SimGenerator {
    design: SimDesign,
    chol: Option<Array2<f64>>,
    beta0: Vec<f64>,
    query: QueryPoint,
    m0: f64,
}

impl SimGenerator {
    pub fn new(design: &SimDesign) -> Result<Self> {
        design.validate()?;
        let chol = match design.covariance {
            CovarianceKind::Identity => None,
            kind => Some(cholesky_factor(&covariance(kind, design.d))?),
        };
        let beta0 = beta_design(design.beta, design.d);
        let query = query_design(design.query, design.d, design.covariance)?;
        let m0 = query.as_slice().iter().zip(&beta0).map(|(a, b)| a * b).sum();
        Ok(SimGenerator {
            design: design.clone(),
            chol,
            beta0,
            query,
            m0,
        })
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn replication(&self, rep: usize) -> Replication {
        let SimDesign { n, d, .. } = self.design;
        let mut rng = ChaCha8Rng::seed_from_u64(self.design.seed);
        rng.set_stream(rep as u64);

        let z = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let x = match &self.chol {
            Some(l) => z.dot(&l.t()),
            None => z,
        };
        let beta0 = ndarray::ArrayView1::from(&self.beta0[..]);
        let mut outcomes = x.dot(&beta0).to_vec();
        for y in &mut outcomes {
            *y += noise_sample(self.design.noise, &mut rng);
        }
        let true_pi: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|row| {
                let row = row.as_slice().expect("rows of a standard-layout array are contiguous");
                match self.design.missingness {
                    Missingness::MarLogistic => mar_logistic_probability(row),
                    Missingness::MarProbitQuadratic => mar_probit_quadratic(row),
                    Missingness::Mcar { p } => p,
                }
            })
            .collect();
        let mut observed: Vec<bool> = true_pi.iter().map(|&p| rng.random::<f64>() < p).collect();
        if !observed.iter().any(|&r| r) {
            // Every mechanism here has positive propensity; an all-missing
            // draw is astronomically rare, but the data type needs one case.
            observed[0] = true;
        }
        for (y, &r) in outcomes.iter_mut().zip(&observed) {
            if !r {
                *y = f64::NAN;
            }
        }
        let pipeline_seed = rng.next_u64();
        let data = Dataset::new(outcomes, observed, x).expect("simulated data are finite");
        Replication {
            data,
            m0: self.m0,
            true_pi,
            beta0: self.beta0.clone(),
            query: self.query.clone(),
            pipeline_seed,
        }
    }
}

/// Draws replication `rep` of `design`.
pub fn gen_replication(design: &SimDesign, rep: usize) -> Result<Replication> {
    Ok(SimGenerator::new(design)?.replication(rep))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    /// Its `seed` is replaced per replication.
    pub pipeline: PipelineConfig,
    /// Hand the pipeline the true propensities instead of estimating them.
    pub oracle_propensity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub m0: f64,
    pub missing_rate: f64,
    pub m_hat: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub variance_hat: Option<f64>,
    pub gamma: Option<f64>,
    pub covered: Option<bool>,
    /// `sqrt(n) (m_hat - m0) / (sigma_hat sqrt(variance_hat))`.
    pub studentized: Option<f64>,
    pub converged: bool,
    pub primal_feasible: bool,
    pub one_se_fallback: bool,
    /// Dual objective increases across CD sweeps, CV fits included.
    pub monotone_violations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    pub avg_bias: f64,
    pub coverage: f64,
    pub avg_length: f64,
    pub n_fail: usize,
    pub n_ok: usize,
    pub mean_missing_rate: f64,
    pub monotone_violations: usize,
    pub studentized: Vec<f64>,
    pub records: Vec<RepRecord>,
}

impl SimMetrics {
    /// Aggregates per-replication records; failures are counted and
    /// otherwise left out.
    pub fn from_records(records: Vec<RepRecord>) -> Self {
        let ok: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
        let bias: Vec<f64> = ok.iter().map(|r| (r.m_hat.unwrap() - r.m0).abs()).collect();
        let covered: Vec<f64> = ok.iter().map(|r| if r.covered.unwrap() { 1.0 } else { 0.0 }).collect();
        let length: Vec<f64> = ok.iter().map(|r| r.ci_upper.unwrap() - r.ci_lower.unwrap()).collect();
        let missing: Vec<f64> = records.iter().map(|r| r.missing_rate).collect();
        SimMetrics {
            avg_bias: mean(&bias),
            coverage: mean(&covered),
            avg_length: mean(&length),
            n_fail: records.len() - ok.len(),
            n_ok: ok.len(),
            mean_missing_rate: mean(&missing),
            monotone_violations: records.iter().map(|r| r.monotone_violations).sum(),
            studentized: ok.iter().filter_map(|r| r.studentized).collect(),
            records,
        }
    }

    pub fn qq(&self) -> Vec<(f64, f64)> {
        qq_points(&self.studentized)
    }
}

/// Runs the pipeline on one replication and records the outcome.
pub fn run_replication(generator: &SimGenerator, rep: usize, mc: &MonteCarloConfig) -> RepRecord {
    let sim = generator.replication(rep);
    let cfg = PipelineConfig {
        seed: sim.pipeline_seed,
        ..mc.pipeline.clone()
    };
    let outcome = if mc.oracle_propensity {
        OraclePropensity::new(sim.true_pi.clone())
            .map_err(|e| e.to_string())
            .and_then(|o| run_pipeline_with(&sim.data, &sim.query, &cfg, &o).map_err(|e| e.to_string()))
    } else {
        run_pipeline(&sim.data, &sim.query, &cfg).map_err(|e| e.to_string())
    };
    let n = sim.data.n() as f64;
    let mut record = RepRecord {
        rep,
        m0: sim.m0,
        missing_rate: sim.data.missing_rate(),
        m_hat: None,
        ci_lower: None,
        ci_upper: None,
        sigma_hat: None,
        variance_hat: None,
        gamma: None,
        covered: None,
        studentized: None,
        converged: false,
        primal_feasible: false,
        one_se_fallback: false,
        monotone_violations: 0,
        error: None,
    };
    match outcome {
        Ok(out) => {
            let r = &out.result;
            let sd = r.sigma_used * r.variance_hat.sqrt();
            record.m_hat = Some(r.m_hat);
            record.ci_lower = Some(r.ci_lower);
            record.ci_upper = Some(r.ci_upper);
            record.sigma_hat = Some(r.sigma_used);
            record.variance_hat = Some(r.variance_hat);
            record.gamma = Some(out.solution.gamma);
            record.covered = Some(r.contains(sim.m0));
            record.studentized = (sd > 0.0).then(|| n.sqrt() * (r.m_hat - sim.m0) / sd);
            record.converged = out.solution.converged;
            record.primal_feasible = out.solution.primal_feasible;
            record.one_se_fallback = out.selection.as_ref().is_some_and(|s| s.one_se_fallback);
            record.monotone_violations = out.solution.monotone_violations
                + out.selection.as_ref().map_or(0, |s| s.monotone_violations);
        }
        Err(e) => {
            log::debug!("replication {rep} failed: {e}");
            record.error = Some(e);
        }
    }
    record
}

/// Runs every replication of `design` (in parallel) and aggregates the
/// results in replication order.
pub fn run_monte_carlo(design: &SimDesign, mc: &MonteCarloConfig) -> Result<SimMetrics> {
    mc.pipeline.validate()?;
    let generator = SimGenerator::new(design)?;
    let records: Vec<RepRecord> = (0..design.replications)
        .into_par_iter()
        .map(|rep| run_replication(&generator, rep, mc))
        .collect();
    Ok(SimMetrics::from_records(records))
}
