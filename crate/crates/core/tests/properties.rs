mod common;

use common::{max_abs_diff, max_slice_diff, random_raw};
use ndarray::{Array2, Axis};
use popid::aig::{accumulate_stats, reestimate, Floors, Variant};
use popid::are::{apply_statistics, StepStatistics};
use popid::fb::{self, XiStorage};
use popid::grid::{build_grid, transition_matrix, Emissions, InitialPrior, TransitionModel};
use popid::model::Lambda;
use popid::oracle::{brute_force_hmm, brute_force_likelihood, wls_mstep, OracleBudget};
use popid::verify::random_instance;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lambda_strategy() -> impl Strategy<Value = Lambda> {
    (0.05..3.0f64, 5.0..500.0f64, -4.0..4.0f64, -20.0..20.0f64, 0.05..20.0f64, 0.05..10.0f64)
        .prop_filter("nonzero gain", |p| p.2.abs() > 1e-3)
        .prop_map(|(r, k, a, b, s, t)| Lambda::new(r, k, a, b, s, t).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_rows_are_stochastic(lambda in lambda_strategy(), m in 2usize..80, h in 0.01..0.5f64) {
        let grid = build_grid(0.0, 2.0 * lambda.k, m).unwrap();
        match transition_matrix(&lambda, &grid, h) {
            Ok(t) => {
                for row in t.matrix.rows() {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
                }
            }
            // Narrow noise can leave a row with no mass on the grid; that must be reported.
            Err(e) => {
                let coverage = matches!(e, popid::Error::GridCoverage { .. });
                prop_assert!(coverage, "unexpected error {}", e);
            }
        }
    }

    #[test]
    fn scaling_one_step_shifts_loglik_only(seed in any::<u64>(), n in 1usize..8, m in 1usize..6, c in prop::sample::select(vec![1e-5, 0.3, 1.0, 7.0, 1e5])) {
        let raw = random_raw(seed, n, m);
        let base = fb::posteriors(&raw.t, &raw.e, &raw.prior).unwrap();
        let step = (seed % n as u64) as usize;
        let mut w = raw.e.weights.clone();
        w.row_mut(step).mapv_inplace(|v| v * c);
        let scaled = fb::posteriors(&raw.t, &Emissions::from_weights(w).unwrap(), &raw.prior).unwrap();
        prop_assert!((scaled.loglik - base.loglik - c.ln()).abs() <= 1e-9);
        prop_assert!(max_slice_diff(&scaled, &base) <= 1e-12);
    }

    #[test]
    fn marginals_chain(seed in any::<u64>(), n in 1usize..8, m in 1usize..6) {
        let raw = random_raw(seed, n, m);
        let out = fb::posteriors(&raw.t, &raw.e, &raw.prior).unwrap();
        for row in out.gamma.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
        for (k, slice) in out.xi.iter().enumerate() {
            let from = slice.sum_axis(Axis(1));
            let to = slice.sum_axis(Axis(0));
            for i in 0..m {
                prop_assert!((from[i] - out.gamma[[k, i]]).abs() <= 1e-12);
                prop_assert!((to[i] - out.gamma[[k + 1, i]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relabeling_cells_permutes_posteriors(seed in any::<u64>(), n in 1usize..6, perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let m = perm.len();
        let raw = random_raw(seed, n, m);
        let t = Array2::from_shape_fn((m, m), |(i, j)| raw.t.matrix[[perm[i], perm[j]]]);
        let e = Array2::from_shape_fn((n, m), |(k, i)| raw.e.weights[[k, perm[i]]]);
        let prior: Vec<f64> = perm.iter().map(|&p| raw.prior.weights[p]).collect();
        let base = fb::posteriors(&raw.t, &raw.e, &raw.prior).unwrap();
        let permuted = fb::posteriors(
            &TransitionModel::from_matrix(t).unwrap(),
            &Emissions::from_weights(e).unwrap(),
            &InitialPrior { weights: prior },
        )
        .unwrap();
        prop_assert!((permuted.loglik - base.loglik).abs() <= 1e-12 * base.loglik.abs().max(1.0));
        for k in 0..n {
            for (i, &pi) in perm.iter().enumerate() {
                prop_assert!((permuted.gamma[[k, i]] - base.gamma[[k, pi]]).abs() <= 1e-12);
            }
        }
        for (p, b) in permuted.xi.iter().zip(&base.xi) {
            for ((i, j), &v) in p.indexed_iter() {
                prop_assert!((v - b[[perm[i], perm[j]]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_backward_matches_raw_enumeration(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=4) {
        let raw = random_raw(seed, n, m);
        let out = fb::posteriors(&raw.t, &raw.e, &raw.prior).unwrap();
        let bf = brute_force_hmm(&raw.t.matrix, &raw.e.weights, &raw.prior.weights, &OracleBudget::default()).unwrap();
        prop_assert!((out.loglik - bf.loglik).abs() <= 1e-10 * bf.loglik.abs().max(1.0));
        prop_assert!(max_abs_diff(&out.gamma, &bf.gamma) <= 1e-10);
        for (k, slice) in out.xi.iter().enumerate() {
            let expect = bf.xi.index_axis(Axis(0), k).to_owned();
            prop_assert!(max_abs_diff(slice, &expect) <= 1e-10);
        }
    }

    #[test]
    fn grid_hmm_matches_path_sum_including_initial_pair(seed in any::<u64>(), n in 1usize..=5, m in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lambda, hmm, ys) = random_instance(&mut rng, n, m).unwrap();
        let out = hmm.posteriors(&lambda, &ys, XiStorage::Full).unwrap();
        let bf = brute_force_likelihood(&lambda, &hmm, &ys, &OracleBudget::default()).unwrap();
        prop_assert!((out.loglik - bf.loglik).abs() <= 1e-10 * bf.loglik.abs().max(1.0));
        prop_assert!(max_abs_diff(&out.gamma, &bf.gamma) <= 1e-10);
        let pair = out.initial_pair.as_ref().unwrap();
        prop_assert!(max_abs_diff(pair, &bf.xi.index_axis(Axis(0), 0).to_owned()) <= 1e-10);
        for (k, slice) in out.xi.iter().enumerate() {
            prop_assert!(max_abs_diff(slice, &bf.xi.index_axis(Axis(0), k + 1).to_owned()) <= 1e-10);
        }
        let total = out.xi_total.sum();
        prop_assert!((total - n as f64).abs() <= 1e-9);
    }

    #[test]
    fn least_squares_agrees_with_exact_update(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lambda, hmm, ys) = random_instance(&mut rng, 40, 12).unwrap();
        let Ok(out) = hmm.posteriors(&lambda, &ys, XiStorage::TotalOnly) else { return Ok(()) };
        let stats = accumulate_stats(&ys, &hmm.grid, &out, hmm.h).unwrap();
        let (Ok(exact), Ok(wls)) = (reestimate(&stats, &lambda, Variant::ExactCriticalPoint), wls_mstep(&stats)) else {
            return Ok(());
        };
        let floors = Floors::for_cell_width(hmm.grid.cell_width());
        prop_assume!(exact.k > floors.k && exact.sigma > floors.sigma && exact.tau > floors.tau);
        for (x, y) in exact.to_array().iter().zip(wls.to_array()) {
            prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-3), "{:?} vs {:?}", exact, wls);
        }
    }

    #[test]
    fn least_squares_ignores_weight_scale(seed in any::<u64>(), c in 1e-6..1e6f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lambda, hmm, ys) = random_instance(&mut rng, 30, 10).unwrap();
        let Ok(out) = hmm.posteriors(&lambda, &ys, XiStorage::TotalOnly) else { return Ok(()) };
        let stats = accumulate_stats(&ys, &hmm.grid, &out, hmm.h).unwrap();
        let Ok(base) = wls_mstep(&stats) else { return Ok(()) };
        let scaled = wls_mstep(&stats.scaled(c)).unwrap();
        for (x, y) in base.to_array().iter().zip(scaled.to_array()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-3));
        }
    }

    #[test]
    fn recursive_update_stays_between_old_and_statistic(
        prev in lambda_strategy(),
        s in (0.0..3.0f64, 1e-3..0.2f64, -4.0..4.0f64, -20.0..20.0f64, 1e-3..50.0f64, 1e-3..50.0f64),
        eps in 1e-6..1.0f64,
    ) {
        let stats = [s.0, s.1, s.2, s.3, s.4, s.5];
        let floors = Floors { sigma: 0.0, tau: 0.0, k: 0.0 };
        let (next, skipped) = apply_statistics(&prev, &StepStatistics(stats.map(Some)), eps, &floors);
        prop_assert_eq!(skipped, [false; 6]);
        let old = prev.transformed();
        let new = next.transformed();
        for i in 0..6 {
            let (lo, hi) = (old[i].min(stats[i]), old[i].max(stats[i]));
            let slack = 1e-12 * hi.abs().max(1.0);
            let value = new[i];
            prop_assert!(value >= lo - slack && value <= hi + slack, "component {} at {} outside [{}, {}]", i, value, lo, hi);
        }
    }
}
