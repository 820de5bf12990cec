//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A small random debiasing instance with `pi` in `[0.2, 1]`.
pub struct Instance {
    pub x: Array2<f64>,
    pub pi: Vec<f64>,
    pub query: Vec<f64>,
}

pub fn random_instance(n: usize, d: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
    let pi = (0..n).map(|_| rng.random_range(0.2..=1.0)).collect();
    let query = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Instance { x, pi, query }
}

pub struct PrimalSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
}

/// Solves `min sum pi_i w_i^2` subject to
/// `|x - (1/sqrt(n)) sum w_i pi_i X_i|_inf <= bound` directly in the primal.
///
/// ADMM on the split `z = A w` with `z` confined to the box, followed by an
/// equality-constrained re-solve on the active set the iterates settle on.
pub fn primal_qp_oracle(x: &Array2<f64>, pi: &[f64], query: &[f64], bound: f64) -> PrimalSolution {
    let (n, d) = x.dim();
    let root_n = (n as f64).sqrt();
    let a = DMatrix::from_fn(d, n, |k, i| x[[i, k]] * pi[i] / root_n);
    let lo = DVector::from_fn(d, |k, _| query[k] - bound);
    let hi = DVector::from_fn(d, |k, _| query[k] + bound);
    let dvec = DVector::from_column_slice(pi);

    let rho = 1.0;
    let system = DMatrix::from_diagonal(&(dvec.clone() * 2.0)) + a.transpose() * &a * rho;
    let chol = system.cholesky().expect("ADMM system is positive definite");
    let mut z = DVector::from_fn(d, |k, _| query[k]);
    let mut u = DVector::zeros(d);
    let mut w = DVector::zeros(n);
    for _ in 0..400_000 {
        w = chol.solve(&(a.transpose() * (&z - &u) * rho));
        let aw = &a * &w;
        let z_old = z.clone();
        z = (&aw + &u).zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h));
        u += &aw - &z;
        let primal_res = (&aw - &z).amax();
        let dual_res = (a.transpose() * (&z - &z_old)).amax() * rho;
        if primal_res < 1e-14 && dual_res < 1e-14 {
            break;
        }
    }

    let violation = |w: &DVector<f64>| {
        let aw = &a * w;
        (0..d)
            .map(|k| (lo[k] - aw[k]).max(aw[k] - hi[k]).max(0.0))
            .fold(0.0f64, f64::max)
    };
    let objective = |w: &DVector<f64>| w.iter().zip(pi).map(|(v, p)| p * v * v).sum::<f64>();

    let mut best = w.clone();
    let scale = u.amax();
    let active: Vec<usize> = (0..d).filter(|&k| u[k].abs() > 1e-9 * scale.max(1e-300)).collect();
    if !active.is_empty() {
        // Minimize w^T D w subject to A_S w = b_S: w = D^{-1} A_S^T nu / 2.
        let a_s = DMatrix::from_fn(active.len(), n, |r, i| a[(active[r], i)]);
        let b_s = DVector::from_fn(active.len(), |r, _| {
            let k = active[r];
            if u[k] > 0.0 { hi[k] } else { lo[k] }
        });
        let dinv_at = DMatrix::from_fn(n, active.len(), |i, r| a_s[(r, i)] / pi[i]);
        let m = &a_s * &dinv_at;
        if let Ok(nu) = m.svd(true, true).solve(&(b_s * 2.0), 1e-13) {
            let polished = &dinv_at * nu * 0.5;
            if violation(&polished) < 1e-11 {
                best = polished;
            }
        }
    }
    PrimalSolution {
        objective: objective(&best),
        max_violation: violation(&best),
        weights: best.iter().copied().collect(),
    }
}

/// `E[(sqrt(n)(m_hat - m0))^2 | X]` by summing over every missingness pattern
/// and integrating Gaussian noise in closed form.
pub fn enumerated_conditional_mse(
    weights: &[f64],
    beta: &[f64],
    beta0: &[f64],
    pi: &[f64],
    x: &Array2<f64>,
    query: &[f64],
    sigma: f64,
) -> f64 {
    let (n, d) = x.dim();
    let root_n = (n as f64).sqrt();
    let offset: f64 = (0..d).map(|k| root_n * query[k] * (beta[k] - beta0[k])).sum();
    let fitted_gap: Array1<f64> = (0..n)
        .map(|i| (0..d).map(|k| x[[i, k]] * (beta0[k] - beta[k])).sum())
        .collect();
    let mut total = 0.0;
    for pattern in 0u32..(1 << n) {
        let mut prob = 1.0;
        let mut mean = offset;
        let mut var = 0.0;
        for i in 0..n {
            if pattern >> i & 1 == 1 {
                prob *= pi[i];
                mean += weights[i] * fitted_gap[i];
                var += weights[i] * weights[i] * sigma * sigma;
            } else {
                prob *= 1.0 - pi[i];
            }
        }
        total += prob * (mean * mean + var);
    }
    total
}
