mod common;

use common::{gaussian, rng};
use elitekv_core::linalg::{matmul, svd, truncated_factors, Matrix};
use proptest::prelude::*;

fn naive_product(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        let mut acc = 0.0;
        for k in 0..a.cols() {
            acc += a.get(i, k) * b.get(k, j);
        }
        acc
    })
}

fn orthogonality_error(m: &Matrix) -> f64 {
    let mtm = matmul(&m.transpose(), m).unwrap();
    mtm.sub(&Matrix::identity(m.cols()))
        .unwrap()
        .frobenius_norm()
}

/// Eigenvalues of the symmetric `MᵀM` via nalgebra, descending.
fn gram_eigen_sigma(m: &Matrix) -> Vec<f64> {
    let nm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let gram = nm.transpose() * &nm;
    let mut eig: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig.truncate(m.rows().min(m.cols()));
    eig
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let a = gaussian(&mut r, 5, 7, 1.0);
    let b = gaussian(&mut r, 7, 3, 1.0);
    let fast = matmul(&a, &b).unwrap();
    let slow = naive_product(&a, &b);
    assert!(fast.sub(&slow).unwrap().max_abs() <= 1e-12);
}

#[test]
fn svd_random_8x6_against_eigen_oracle() {
    let mut r = rng(12);
    let m = gaussian(&mut r, 8, 6, 1.0);
    let s = svd(&m).unwrap();
    let norm = m.frobenius_norm();
    assert!(s.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8 * norm);
    assert!(orthogonality_error(&s.u) <= 1e-9 * 8.0);
    assert!(orthogonality_error(&s.vt.transpose()) <= 1e-9 * 6.0);
    let oracle = gram_eigen_sigma(&m);
    for (a, b) in s.sigma.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}

#[test]
fn svd_is_bit_deterministic() {
    let mut r = rng(13);
    let m = gaussian(&mut r, 9, 13, 1.0);
    assert_eq!(svd(&m).unwrap(), svd(&m).unwrap());
}

#[test]
fn truncation_error_equals_tail_sigma() {
    let mut r = rng(14);
    let m = gaussian(&mut r, 10, 6, 1.0);
    let sigma = svd(&m).unwrap().sigma;
    let (a, b) = truncated_factors(&m, 3).unwrap();
    let err = m.sub(&matmul(&a, &b).unwrap()).unwrap().frobenius_norm();
    let oracle = (sigma[3].powi(2) + sigma[4].powi(2) + sigma[5].powi(2)).sqrt();
    assert!((err - oracle).abs() <= 1e-8 * oracle.max(1.0));

    let (a, b) = truncated_factors(&m, 6).unwrap();
    let full = m.sub(&matmul(&a, &b).unwrap()).unwrap().frobenius_norm();
    assert!(full <= 1e-8 * m.frobenius_norm());
}

#[test]
fn exact_rank_two_reconstructs() {
    let mut r = rng(15);
    let m = matmul(&gaussian(&mut r, 7, 2, 1.0), &gaussian(&mut r, 2, 5, 1.0)).unwrap();
    let (a, b) = truncated_factors(&m, 2).unwrap();
    let err = m.sub(&matmul(&a, &b).unwrap()).unwrap().frobenius_norm();
    assert!(err <= 1e-10 * m.frobenius_norm());
}

#[test]
fn truncation_beats_random_rank_r_competitors() {
    let mut r = rng(16);
    for trial in 0..5 {
        let (rows, cols) = (6 + trial, 4 + trial);
        let m = gaussian(&mut r, rows, cols, 1.0);
        for rank in 1..=rows.min(cols) {
            let (a, b) = truncated_factors(&m, rank).unwrap();
            let best = m.sub(&matmul(&a, &b).unwrap()).unwrap().frobenius_norm();
            for i in 0..200 {
                // half pure random, half perturbations of the optimum
                let q = if i % 2 == 0 {
                    matmul(
                        &gaussian(&mut r, rows, rank, 1.0),
                        &gaussian(&mut r, rank, cols, 0.5),
                    )
                    .unwrap()
                } else {
                    let pa = a.add(&gaussian(&mut r, rows, rank, 1e-3)).unwrap();
                    let pb = b.add(&gaussian(&mut r, rank, cols, 1e-3)).unwrap();
                    matmul(&pa, &pb).unwrap()
                };
                let other = m.sub(&q).unwrap().frobenius_norm();
                assert!(best <= other + 1e-12, "rank {rank}: {best} > {other}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_invariants_hold(rows in 1usize..9, cols in 1usize..9, seed in 0u64..1_000) {
        let mut r = rng(seed);
        let m = gaussian(&mut r, rows, cols, 1.0);
        let s = svd(&m).unwrap();
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        prop_assert!(orthogonality_error(&s.u) <= 1e-9 * rows as f64);
        prop_assert!(orthogonality_error(&s.vt.transpose()) <= 1e-9 * cols as f64);
        let err = s.reconstruct().sub(&m).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-8 * m.frobenius_norm());
    }

    #[test]
    fn matmul_is_associative_within_tolerance(n in 1usize..7, k in 1usize..7, p in 1usize..7, q in 1usize..7, seed in 0u64..1_000) {
        let mut r = rng(seed);
        let a = gaussian(&mut r, n, k, 1.0);
        let b = gaussian(&mut r, k, p, 1.0);
        let c = gaussian(&mut r, p, q, 1.0);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let bound = 1e-9 * a.frobenius_norm() * b.frobenius_norm() * c.frobenius_norm();
        prop_assert!(left.sub(&right).unwrap().frobenius_norm() <= bound);
    }
}
