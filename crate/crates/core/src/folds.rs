//! Fold assignment and selection helpers shared by the cross-validation
//! routines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Assigns each of `n` observations to one of `k` folds: position `p` of a
/// seeded shuffle goes to fold `p mod k`.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    fold_of
}

/// Training and held-out index lists for fold `f`, each in ascending order.
pub fn split(fold_of: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, &g) in fold_of.iter().enumerate() {
        if g == f {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

/// Index of the minimum, with values within `rel_tol` of it counted as ties
/// and resolved toward the largest index.
pub(crate) fn argmin_prefer_last(values: &[f64], rel_tol: f64) -> Option<usize> {
    let min = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let cutoff = min + rel_tol * (1.0 + min.abs());
    values.iter().rposition(|&v| v <= cutoff)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = assign_folds(23, 5, 7);
        let b = assign_folds(23, 5, 7);
        assert_eq!(a, b);
        let mut counts = [0usize; 5];
        for &f in &a {
            counts[f] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
        assert_ne!(a, assign_folds(23, 5, 8));
    }

    #[test]
    fn split_partitions_indices() {
        let fold_of = vec![0, 1, 0, 2, 1];
        let (train, held) = split(&fold_of, 1);
        assert_eq!(train, vec![0, 2, 3]);
        assert_eq!(held, vec![1, 4]);
    }

    #[test]
    fn argmin_ties_go_last() {
        assert_eq!(argmin_prefer_last(&[3.0, 1.0, 2.0, 1.0], 0.0), Some(3));
        assert_eq!(argmin_prefer_last(&[3.0, 1.0, 1.0 + 1e-15, 4.0], 1e-12), Some(2));
        assert_eq!(argmin_prefer_last(&[f64::NAN, f64::INFINITY], 0.0), None);
        assert_eq!(argmin_prefer_last(&[f64::NAN, 2.0], 0.0), Some(1));
    }
}
