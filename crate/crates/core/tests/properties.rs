use proptest::prelude::*;

use ckfnet::ckf::{cubature_points, weighted_cross, weighted_mean};
use ckfnet::filter::{head_to_spd_factor, head_to_weights, normalize_feature, Architecture};
use ckfnet::linalg::{cholesky, jacobi_eigen, spd_perturb, spd_solve, Matrix, Vector};

/// `A Aᵀ + shift I` from a flat vector of entries.
fn spd_from(entries: &[f64], n: usize, shift: f64) -> Matrix {
    let a = Matrix::from_vec_unchecked(n, n, entries[..n * n].to_vec());
    a.matmul_t(&a).add(&Matrix::identity(n).scale(shift))
}

fn spd_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1usize..=6).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(-2.0f64..2.0, n * n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cholesky_reconstructs((n, a, _) in spd_case()) {
        let p = spd_from(&a, n, 0.3);
        let l = cholesky(&p).unwrap();
        let back = l.lower().matmul_t(l.lower());
        prop_assert!(back.max_abs_diff(&p) < 1e-12 * (1.0 + p.max_abs()));
        for i in 0..n {
            prop_assert!(l.lower()[(i, i)] > 0.0);
            for j in (i + 1)..n {
                prop_assert_eq!(l.lower()[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cubature_points_match_first_two_moments((n, a, mean) in spd_case()) {
        let p = spd_from(&a, n, 0.3);
        let mean = Vector::from_vec(mean);
        let set = cubature_points(&mean, &cholesky(&p).unwrap());
        prop_assert_eq!(set.len(), 2 * n);
        let m = weighted_mean(&set.weights, &set.points);
        prop_assert!(m.max_abs_diff(&mean) < 1e-12);
        let scatter = weighted_cross(&set.weights, &set.points, &mean, &set.points, &mean);
        prop_assert!(scatter.max_abs_diff(&p) < 1e-11);
    }

    #[test]
    fn spd_solve_inverts((n, a, b) in spd_case()) {
        let p = spd_from(&a, n, 0.5);
        let rhs = Matrix::from_vec_unchecked(n, 1, b);
        let x = spd_solve(&p, &rhs).unwrap();
        prop_assert!(p.matmul(&x).max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn perturbation_scales_eigenvalues(
        (n, a, _) in spd_case(),
        raw in prop::collection::vec(0.8f64..1.2, 6),
    ) {
        let p = spd_from(&a, n, 0.3);
        let factors = &raw[..n];
        let q = spd_perturb(&p, factors).unwrap();
        prop_assert!(q.max_abs_diff(&q.transpose()) < 1e-12);
        let before = jacobi_eigen(&p).unwrap().values;
        let after = jacobi_eigen(&q).unwrap().values;
        let (lo, hi) = factors.iter().fold((f64::MAX, f64::MIN), |(l, h), &f| (l.min(f), h.max(f)));
        for (b, a) in before.iter().zip(after.iter()) {
            prop_assert!(*a > 0.0);
            // each eigenvalue moves by at most the extreme factors
            prop_assert!(*a >= lo * b - 1e-9 && *a <= hi * b + 1e-9);
        }
        let trace = |m: &Matrix| (0..n).map(|i| m[(i, i)]).sum::<f64>();
        prop_assert!(trace(&q) >= lo * trace(&p) - 1e-9 && trace(&q) <= hi * trace(&p) + 1e-9);
    }

    #[test]
    fn head_outputs_always_give_spd_factor(n in 1usize..=6, raw in prop::collection::vec(-50.0f64..50.0, 21)) {
        let len = Architecture::tril_len(n);
        let f = head_to_spd_factor(&raw[..len], n);
        for i in 0..n {
            prop_assert!(f.lower()[(i, i)] >= 1e-6);
        }
        let p = f.lower().matmul_t(f.lower());
        prop_assert!(cholesky(&p.add(&Matrix::identity(n).scale(1e-9))).is_ok());
    }

    #[test]
    fn head_weights_are_a_distribution(logits in prop::collection::vec(-800.0f64..800.0, 1..12)) {
        let w = head_to_weights(&logits);
        prop_assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_features_have_unit_norm_or_pass_through(v in prop::collection::vec(-1e3f64..1e3, 1..8)) {
        let raw = Vector::from_vec(v);
        let norm = raw.norm();
        let out = normalize_feature(raw.clone());
        if norm > 1e-9 {
            prop_assert!((out.value.norm() - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(out.value, raw);
        }
    }
}
