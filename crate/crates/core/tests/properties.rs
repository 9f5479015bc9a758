//! Fast paths against the brute-force oracles on random inputs.

use cvlm::copula::{log_copula_density, reparam_copula_sample};
use cvlm::lowrank::{self, DiagRankOneCov};
use cvlm::objective::{kl_diag_gaussian_std_normal, kl_fullcov_gaussian_std_normal};
use cvlm::oracles::{dense_quadratic, dense_reference};
use cvlm::special;
use proptest::prelude::*;

fn cov_strategy(max_d: usize) -> impl Strategy<Value = DiagRankOneCov> {
    (1..=max_d).prop_flat_map(|d| {
        (proptest::collection::vec(0.05f64..3.0, d), proptest::collection::vec(-2.0f64..2.0, d))
            .prop_map(|(w, a)| DiagRankOneCov::new(w, a).unwrap())
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

proptest! {
    #[test]
    fn log_det_and_quadratic_form_match_dense(cov in cov_strategy(24), seed in any::<u64>()) {
        let dense = dense_reference(&cov).unwrap();
        prop_assert!(rel(lowrank::log_det(&cov), dense.logdet) < 1e-9);
        let q: Vec<f64> = (0..cov.dim()).map(|i| ((seed >> (i % 48)) as f64 % 7.0) - 3.0).collect();
        let fast = lowrank::inv_quadratic_form(&cov, &q).unwrap();
        prop_assert!(rel(fast, dense_quadratic(&dense.inverse, &q)) < 1e-9);
    }

    #[test]
    fn cholesky_matches_dense(cov in cov_strategy(24)) {
        let dense = dense_reference(&cov).unwrap();
        let chol = lowrank::cholesky(&cov).unwrap();
        let worst = (chol.matrix() - &dense.cholesky).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(worst < 1e-9);
    }

    #[test]
    fn copula_density_matches_dense_formula(cov in cov_strategy(12), q0 in -3.0f64..3.0) {
        let d = cov.dim();
        let q: Vec<f64> = (0..d).map(|i| q0 * (1.0 + i as f64).sin()).collect();
        let dense = dense_reference(&cov).unwrap();
        let diag: Vec<f64> = (0..d).map(|i| dense.matrix[[i, i]]).collect();
        let want = 0.5 * diag.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * dense.logdet
            + 0.5 * (q.iter().zip(&diag).map(|(x, s)| x * x / s).sum::<f64>() - dense_quadratic(&dense.inverse, &q));
        prop_assert!(rel(log_copula_density(&cov, &q).unwrap(), want) < 1e-9);
    }

    #[test]
    fn independent_copula_is_flat(w in proptest::collection::vec(0.05f64..3.0, 1..20), q0 in -5.0f64..5.0) {
        let d = w.len();
        let cov = DiagRankOneCov::new(w, vec![0.0; d]).unwrap();
        let q = vec![q0; d];
        prop_assert!(log_copula_density(&cov, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn copula_sample_is_lower_factor_times_noise(cov in cov_strategy(10), e0 in -2.0f64..2.0) {
        let eps: Vec<f64> = (0..cov.dim()).map(|i| e0 + 0.3 * i as f64).collect();
        let dense = dense_reference(&cov).unwrap();
        let chol = lowrank::cholesky(&cov).unwrap();
        let q = reparam_copula_sample(&chol, &eps).unwrap().q;
        for i in 0..cov.dim() {
            let want: f64 = (0..=i).map(|j| dense.cholesky[[i, j]] * eps[j]).sum();
            prop_assert!((q[i] - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn kl_terms_are_non_negative(mu in proptest::collection::vec(-3.0f64..3.0, 1..10), lv in -3.0f64..2.0, cov in cov_strategy(6)) {
        let logvar = vec![lv; mu.len()];
        prop_assert!(kl_diag_gaussian_std_normal(&mu, &logvar).unwrap() >= 0.0);
        let m = vec![0.5; cov.dim()];
        prop_assert!(kl_fullcov_gaussian_std_normal(&m, &cov).unwrap() >= -1e-12);
    }

    #[test]
    fn quantile_inverts_cdf(p in 1e-12f64..(1.0 - 1e-12)) {
        let x = special::quantile(p);
        prop_assert!((special::cdf(x) - p).abs() <= 1e-12 + 1e-9 * p.min(1.0 - p));
    }
}
