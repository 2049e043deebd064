//! Randomized truncated SVD checked against a dense Golub-Kahan SVD (nalgebra).

use gptrec::linalg::Matrix;
use gptrec::svd::{truncated_svd, truncated_svd_sparse, InteractionMatrix, SvdOptions};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

/// ‖M − M_t‖_F for the best rank-t approximation: sqrt of the tail of σ².
fn best_rank_error(m: &Matrix, t: usize) -> f64 {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[t..].iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_dense(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_binary(rows: usize, cols: usize, density: f64, seed: u64) -> InteractionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<Vec<usize>> = (0..rows)
        .map(|_| (0..cols).filter(|_| rng.random_bool(density)).collect())
        .collect();
    InteractionMatrix::from_rows(cols, &r)
}

#[test]
fn dense_20x15_rank5_within_five_percent_of_optimal() {
    for seed in 0..5 {
        let m = random_dense(20, 15, seed);
        let f = truncated_svd(&m, 5, seed + 100, SvdOptions::default()).unwrap();
        let err = m.sub(&f.reconstruct()).frobenius_norm();
        let best = best_rank_error(&m, 5);
        assert!(err <= 1.05 * best, "seed {seed}: {err} vs optimal {best}");
    }
}

#[test]
fn singular_values_match_dense_oracle() {
    let m = random_binary(32, 24, 0.3, 7);
    let dense = m.to_dense();
    let mut oracle: Vec<f64> = to_na(&dense).singular_values().iter().copied().collect();
    oracle.sort_by(|a, b| b.total_cmp(a));
    let f = truncated_svd_sparse(&m, 4, 1, SvdOptions::default()).unwrap();
    for (got, want) in f.singular_values.iter().zip(&oracle) {
        assert!((got - want).abs() / want < 1e-3, "{got} vs {want}");
    }
}

#[test]
fn factors_orthonormal_and_sorted() {
    for seed in 0..4 {
        let m = random_binary(60, 40, 0.15, seed);
        let f = truncated_svd_sparse(&m, 6, seed, SvdOptions::default()).unwrap();
        assert!(f.user_factors.orthonormality_defect() < 1e-6);
        assert!(f.item_factors.orthonormality_defect() < 1e-6);
        assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.singular_values.iter().all(|&s| s >= 0.0));
    }
}

#[test]
fn reconstruction_error_non_increasing_in_rank() {
    let m = random_binary(40, 30, 0.2, 11);
    let dense = m.to_dense();
    let mut prev = f64::INFINITY;
    for t in 1..=12 {
        let f = truncated_svd_sparse(&m, t, 5, SvdOptions::default()).unwrap();
        let err = dense.sub(&f.reconstruct()).frobenius_norm();
        assert!(err <= prev + 1e-9, "t={t}: {err} > {prev}");
        assert!(err <= 1.05 * best_rank_error(&dense, t));
        prev = err;
    }
}

#[test]
fn sparse_and_dense_operators_agree() {
    let m = random_binary(25, 18, 0.25, 3);
    let a = truncated_svd_sparse(&m, 3, 8, SvdOptions::default()).unwrap();
    let b = truncated_svd(&m.to_dense(), 3, 8, SvdOptions::default()).unwrap();
    for (x, y) in a.item_factors.data.iter().zip(&b.item_factors.data) {
        assert!((x - y).abs() < 1e-9);
    }
}
