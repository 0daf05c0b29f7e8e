mod common;

use common::synthetic_truth;
use popid::aig::{accumulate_stats, q_value, reestimate, Variant};
use popid::are::{epsilon, StepSchedule};
use popid::fb::XiStorage;
use popid::grid::{build_grid, PriorSpec, TransitionNorm};
use popid::hmm::GridHmm;
use popid::model::{logistic_exact, logistic_step, simulate, Lambda, SimConfig};
use popid::oracle::{brute_force_likelihood, fd_grad_q, OracleBudget};
use popid::verify::{random_dataset, random_instance};
use popid::Param;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn euler(u0: f64, r: f64, k: f64, h: f64, t: f64) -> f64 {
    let steps = (t / h).round() as usize;
    (0..steps).fold(u0, |u, _| logistic_step(u, r, k, h).unwrap())
}

#[test]
fn exact_solution_matches_fine_euler() {
    let exact = logistic_exact(5.0, 0.8, 100.0, 1.0);
    let fine = euler(5.0, 0.8, 100.0, 1e-4, 1.0);
    assert!((exact - fine).abs() / exact <= 1e-3, "{exact} vs {fine}");
}

#[test]
fn euler_error_is_first_order() {
    let t = 5.0;
    let exact = logistic_exact(5.0, 0.8, 100.0, t);
    let errs: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|&h| (euler(5.0, 0.8, 100.0, h, t) - exact).abs()).collect();
    for pair in errs.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!((1.8..2.2).contains(&ratio), "halving h shrank the error by {ratio}: {errs:?}");
    }
}

#[test]
fn long_run_state_mean_settles_at_capacity() {
    let truth = synthetic_truth();
    let (r, k, h, s) = (truth.r, truth.k, 0.05, truth.sigma);
    let means: Vec<f64> = (0..100u64)
        .map(|seed| {
            let cfg = SimConfig { h, steps: 2000, u0: 5.0, seed };
            let traj = simulate(&truth, &cfg, &mut cfg.rng()).unwrap();
            let tail = &traj.states[1501..];
            tail.iter().sum::<f64>() / tail.len() as f64
        })
        .collect();
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let sd = (means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt();
    let se = sd / (means.len() as f64).sqrt();
    // Linearized fluctuations around K are AR(1) with coefficient 1 - h r;
    // stationarity of E[u (1 - u/K)] = 0 puts the mean at K - Var(u)/K.
    let phi = 1.0 - h * r;
    let var = s * s / (1.0 - phi * phi);
    let expected = k - var / k;
    assert!((grand - expected).abs() <= 3.0 * se + 0.05, "mean {grand}, expected {expected} ± {se}");
}

#[test]
fn grid_likelihood_examples_match_path_sums() {
    for (seed, n, m) in [(7u64, 4usize, 3usize), (11, 5, 4)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lambda, hmm, ys) = random_instance(&mut rng, n, m).unwrap();
        let fb = hmm.posteriors(&lambda, &ys, XiStorage::Full).unwrap();
        let bf = brute_force_likelihood(&lambda, &hmm, &ys, &OracleBudget::default()).unwrap();
        assert!((fb.loglik - bf.loglik).abs() <= 1e-10 * bf.loglik.abs());
        for (x, y) in fb.gamma.iter().zip(bf.gamma.iter()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
}

fn synthetic_hmm(m: usize, norm: TransitionNorm) -> GridHmm {
    GridHmm::new(build_grid(0.0, 200.0, m).unwrap(), PriorSpec::Delta(5.0), norm, 0.05).unwrap()
}

#[test]
fn em_update_obeys_the_likelihood_bound() {
    let truth = synthetic_truth();
    let cfg = SimConfig { h: 0.05, steps: 400, u0: 5.0, seed: 21 };
    let ys = simulate(&truth, &cfg, &mut cfg.rng()).unwrap().observations;
    let hmm = synthetic_hmm(48, TransitionNorm::Density);
    let mut lambda = Lambda::new(0.6, 120.0, 1.7, 6.0, 4.0, 3.0).unwrap();
    for _ in 0..5 {
        let fb = hmm.posteriors(&lambda, &ys, XiStorage::TotalOnly).unwrap();
        let stats = accumulate_stats(&ys, &hmm.grid, &fb, hmm.h).unwrap();
        let next = reestimate(&stats, &lambda, Variant::ExactCriticalPoint).unwrap();
        let gain_q = q_value(&lambda, &next, &ys, &hmm).unwrap() - q_value(&lambda, &lambda, &ys, &hmm).unwrap();
        let gain_l = hmm.loglik(&next, &ys).unwrap() - hmm.loglik(&lambda, &ys).unwrap();
        assert!(gain_q >= -1e-9, "M-step lowered Q by {gain_q}");
        assert!(gain_l >= gain_q - 1e-8 * gain_l.abs().max(1.0), "likelihood gain {gain_l} below Q gain {gain_q}");
        lambda = next;
    }
}

#[test]
fn exact_update_is_a_critical_point_of_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..3 {
        let data = random_dataset(&mut rng, &synthetic_truth(), 0.05, 200, 32).unwrap();
        let hmm = GridHmm::new(
            build_grid(0.0, 2.0 * data.start.k, 32).unwrap(),
            PriorSpec::Delta(data.u0),
            TransitionNorm::Density,
            0.05,
        )
        .unwrap();
        let fb = hmm.posteriors(&data.start, &data.ys, XiStorage::TotalOnly).unwrap();
        let stats = accumulate_stats(&data.ys, &hmm.grid, &fb, hmm.h).unwrap();
        let Ok(next) = reestimate(&stats, &data.start, Variant::ExactCriticalPoint) else { continue };
        let grad = fd_grad_q(&data.start, &next, &data.ys, &hmm, 1e-5).unwrap();
        assert!(grad.max_relative(&Param::ALL) <= 1e-4, "{:?}", grad.relative());
        let verbatim = reestimate(&stats, &data.start, Variant::PaperVerbatim).unwrap();
        let grad = fd_grad_q(&data.start, &verbatim, &data.ys, &hmm, 1e-5).unwrap();
        assert!(grad.max_relative(&[Param::R, Param::A, Param::Sigma, Param::Tau]) <= 1e-4);
    }
}

#[test]
fn bertrand_partial_sums_grow_like_log_log() {
    let schedule = StepSchedule::Bertrand { k: 1.0, n0: 2 };
    let mut sum = 0.0;
    let mut at_thousand = 0.0;
    for n in 1..=1_000_000u64 {
        sum += epsilon(&schedule, n);
        if n == 1000 {
            at_thousand = sum;
        }
    }
    // Integral test: Σ_{1000<n≤10^6} 1/(n ln n) = ln ln 10^6 - ln ln 10^3 = ln 2,
    // up to the first omitted term.
    let growth = sum - at_thousand;
    assert!((growth - 2f64.ln()).abs() <= 1.0 / (1000.0 * 1000f64.ln()), "growth {growth}");
    assert!(sum > at_thousand);
}
