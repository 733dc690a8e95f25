use ndarray::{Array1, Array2};
use proptest::prelude::*;
use soir_core::penalty::{group_soft_threshold, project_group_l2_ball, project_l1};
use soir_core::solver::{bridge_augmented_objective, bridge_objective, bridge_theta, lambda_grid};
use soir_core::wavelet::{WaveletBasisSpec, WaveletFamily};
use soir_core::{dwt2, idwt2, support_auc, CoefficientSet, CorrectedMoments, ImageGrid};

fn family() -> impl Strategy<Value = WaveletFamily> {
    prop_oneof![Just(WaveletFamily::Haar), Just(WaveletFamily::Sym4)]
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wavelet_is_orthonormal(fam in family(), values in prop::collection::vec(-10.0f64..10.0, 256), j0 in 0usize..4) {
        let spec = WaveletBasisSpec::new(fam, j0, 16).unwrap();
        let img = ImageGrid::from_vec(16, values).unwrap();
        let c = dwt2(&img, &spec).unwrap();
        prop_assert!((c.dot(&c).sqrt() - img.frobenius_norm()).abs() < 1e-10 * (1.0 + img.frobenius_norm()));
        let back = idwt2(c.view(), &spec).unwrap();
        for (a, b) in back.values().iter().zip(img.values().iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn wavelet_is_linear(fam in family(), a in prop::collection::vec(-1.0f64..1.0, 64), b in prop::collection::vec(-1.0f64..1.0, 64), s in -3.0f64..3.0) {
        let spec = WaveletBasisSpec::new(fam, 1, 8).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let ca = dwt2(&ImageGrid::from_vec(8, a).unwrap(), &spec).unwrap();
        let cb = dwt2(&ImageGrid::from_vec(8, b).unwrap(), &spec).unwrap();
        let cc = dwt2(&ImageGrid::from_vec(8, combo).unwrap(), &spec).unwrap();
        for i in 0..64 {
            prop_assert!((cc[i] - ca[i] - s * cb[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn l1_projection_is_feasible_and_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..20), r in 0.01f64..10.0) {
        let x = project_l1(&v, r).unwrap();
        let norm: f64 = x.iter().map(|a| a.abs()).sum();
        prop_assert!(norm <= r * (1.0 + 1e-12));
        let again = project_l1(&x, r).unwrap();
        for (a, b) in again.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // signs are never flipped
        for (a, b) in x.iter().zip(&v) {
            prop_assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn group_projection_is_feasible_and_nonexpansive(a in matrix(3, 6), b in matrix(3, 6), r in 0.01f64..10.0) {
        let pa = project_group_l2_ball(&CoefficientSet(a.clone()), r).unwrap();
        let pb = project_group_l2_ball(&CoefficientSet(b.clone()), r).unwrap();
        prop_assert!(soir_core::PenaltyKind::GroupLassoQ2.norm(&pa) <= r * (1.0 + 1e-12));
        let before = (&a - &b).mapv(|v| v * v).sum().sqrt();
        prop_assert!(pa.frobenius_distance(&pb) <= before + 1e-12);
    }

    #[test]
    fn soft_threshold_shrinks_each_group(a in matrix(2, 5), t in 0.0f64..4.0) {
        let out = group_soft_threshold(&CoefficientSet(a.clone()), t, None).unwrap();
        for j in 0..5 {
            let before = a.column(j).dot(&a.column(j)).sqrt();
            let after = out.0.column(j).dot(&out.0.column(j)).sqrt();
            prop_assert!((after - (before - t).max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn bridge_theta_minimizes_augmented_objective(eta in matrix(2, 5), lambda in 0.1f64..3.0) {
        let tau = lambda * lambda / 4.0;
        let mom = CorrectedMoments::from_dense(
            vec![Array2::eye(5), Array2::eye(5)],
            vec![Array1::ones(5), Array1::zeros(5)],
            10,
        ).unwrap();
        let eta = CoefficientSet(eta);
        let s = soir_core::penalty::group_l1_norms(&eta);
        let theta = bridge_theta(&s, tau);
        let at_opt = bridge_augmented_objective(&eta, &theta, tau, &mom).unwrap();
        prop_assert!((at_opt - bridge_objective(&eta, lambda, &mom).unwrap()).abs() < 1e-8 * (1.0 + at_opt.abs()));
        let perturbed: Vec<f64> = theta.iter().map(|t| t * 1.3 + 0.01).collect();
        prop_assert!(bridge_augmented_objective(&eta, &perturbed, tau, &mom).unwrap() >= at_opt - 1e-12);
    }

    #[test]
    fn lambda_grid_is_descending_with_fixed_ratio(top in 1e-3f64..1e3, len in 2usize..40) {
        let g = lambda_grid(top, len, 1e-3);
        prop_assert_eq!(g.len(), len);
        prop_assert!((g[0] - top).abs() <= 1e-12 * top);
        prop_assert!((g[len - 1] / top - 1e-3).abs() < 1e-9);
        prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn auc_flips_under_score_reversal(scores in prop::collection::vec(0.0f64..1.0, 16)) {
        let mask = Array2::from_shape_fn((4, 4), |(r, _)| r < 2);
        let s = Array2::from_shape_vec((4, 4), scores.clone()).unwrap();
        let rev = s.mapv(|v| 1.0 - v);
        let a = support_auc(s.view(), mask.view()).unwrap();
        let b = support_auc(rev.view(), mask.view()).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}
