use caffnet_core::constraint::{binomial, expected_len};
use caffnet_core::fuzz::matrix_with_rank;
use caffnet_core::linalg::{pinv, rank, spectral_norm, svd};
use caffnet_core::rng::{stream, streams};
use caffnet_core::{enumerate_combinations, CombinationMode, Matrix};
use proptest::prelude::*;

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    let scale = 1.0 + a.max_abs().max(b.max_abs());
    a.sub(b).unwrap().max_abs() <= tol * scale
}

fn shaped(seed: u64, rows: usize, cols: usize, rank: usize) -> Matrix {
    matrix_with_rank(&mut stream(seed, streams::FUZZ), rows, cols, rank.min(rows.min(cols)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn penrose_identities(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7, r in 0usize..7) {
        let a = shaped(seed, rows, cols, r);
        let p = pinv(&a, 1e-10).unwrap();
        let apa = a.matmul(&p).unwrap().matmul(&a).unwrap();
        let pap = p.matmul(&a).unwrap().matmul(&p).unwrap();
        let ap = a.matmul(&p).unwrap();
        let pa = p.matmul(&a).unwrap();
        prop_assert!(close(&apa, &a, 1e-8));
        prop_assert!(close(&pap, &p, 1e-8));
        prop_assert!(close(&ap, &ap.transpose(), 1e-8));
        prop_assert!(close(&pa, &pa.transpose(), 1e-8));
    }

    #[test]
    fn projectors_are_contractions(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7, r in 0usize..7) {
        let a = shaped(seed, rows, cols, r);
        let p = pinv(&a, 1e-10).unwrap();
        let range = p.matmul(&a).unwrap();
        let null = Matrix::identity(cols).sub(&range).unwrap();
        prop_assert!(spectral_norm(&range).unwrap() <= 1.0 + 1e-8);
        prop_assert!(spectral_norm(&null).unwrap() <= 1.0 + 1e-8);
        prop_assert!(close(&null.matmul(&null).unwrap(), &null, 1e-8));
        prop_assert!(a.matmul(&null).unwrap().max_abs() <= 1e-8 * (1.0 + a.max_abs()));
    }

    #[test]
    fn rank_of_product_is_capped(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8, r in 0usize..8) {
        let a = shaped(seed, rows, cols, r);
        prop_assert!(rank(&a, 1e-10).unwrap() <= r.min(rows.min(cols)));
    }

    #[test]
    fn singular_values_are_sorted_and_reconstruct(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7) {
        let a = shaped(seed, rows, cols, rows.min(cols));
        let s = svd(&a).unwrap();
        prop_assert!(s.singular.windows(2).all(|w| w[0] >= w[1]));
        let k = s.singular.len();
        let us = Matrix::from_fn(rows, k, |i, j| s.u[(i, j)] * s.singular[j]);
        prop_assert!(close(&us.matmul(&s.v.transpose()).unwrap(), &a, 1e-12));
    }

    #[test]
    fn combination_counts(m in 1usize..14, n in 1usize..8) {
        let k = m.min(n);
        let full = enumerate_combinations(m, n, CombinationMode::Full).unwrap();
        let lite = enumerate_combinations(m, n, CombinationMode::Lite).unwrap();
        let sum: u128 = (1..=k).map(|j| binomial(m, j)).sum();
        prop_assert_eq!(full.len(), sum);
        prop_assert!(full.len() < 1u128 << m);
        prop_assert_eq!(full.len(), expected_len(m, n, CombinationMode::Full));
        let lite_len = if k == 1 { m as u128 } else { m as u128 + binomial(m, k) };
        prop_assert_eq!(lite.len(), lite_len);
        let listed: Vec<_> = full.iter().collect();
        prop_assert_eq!(listed.len() as u128, full.len());
        prop_assert!(listed.windows(2).all(|w| w[0].indices() < w[1].indices()));
    }
}
