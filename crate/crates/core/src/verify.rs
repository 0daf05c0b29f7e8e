//! Conformance checks run by `popid verify`: forward-backward against path
//! enumeration, finite-difference gradients of the auxiliary function at
//! both M-steps, the least-squares cross-check and the running-average
//! identity of the recursive update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aig::{accumulate_stats, reestimate, Floors, Variant};
use crate::are::{apply_statistics, epsilon, StepSchedule, StepStatistics};
use crate::config::{RunConfig, VerifySection};
use crate::error::{Error, Param, Result};
use crate::fb::XiStorage;
use crate::grid::{build_grid, PriorSpec, StateGrid, TransitionNorm};
use crate::hmm::{GridHmm, GridSpec};
use crate::model::{simulate, Lambda, SimConfig};
use crate::oracle::{brute_force_likelihood, fd_grad_q, wls_mstep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub ran: usize,
    pub skipped: usize,
    pub max_error: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

impl Check {
    fn new(name: &str, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            status: Status::Skipped,
            ran: 0,
            skipped: 0,
            max_error: 0.0,
            tolerance,
            failures: Vec::new(),
            details: None,
        }
    }

    fn record(&mut self, label: String, error: f64) {
        self.ran += 1;
        if error.is_nan() || error > self.max_error {
            self.max_error = error;
        }
        if !(error <= self.tolerance) {
            self.failures.push(format!("{label}: error {error:.3e}"));
        }
    }

    fn fail(&mut self, label: String, reason: String) {
        self.ran += 1;
        self.max_error = f64::INFINITY;
        self.failures.push(format!("{label}: {reason}"));
    }

    fn finish(mut self) -> Self {
        self.status = if self.ran == 0 {
            Status::Skipped
        } else if self.failures.is_empty() {
            Status::Pass
        } else {
            Status::Fail
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// A small random model, grid and observation block.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Result<(Lambda, GridHmm, Vec<f64>)> {
    let k = rng.random_range(5.0..50.0);
    let h = rng.random_range(0.05..0.5);
    let r = rng.random_range(0.2..2.0f64).min(1.0 / h);
    let du = 2.0 * k / m as f64;
    let a = rng.random_range(0.5..3.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let lambda = Lambda::new(
        r,
        k,
        a,
        rng.random_range(-5.0..5.0),
        du * rng.random_range(0.3..2.0),
        a.abs() * du * rng.random_range(0.3..2.0),
    )?;
    let prior =
        if rng.random::<bool>() { PriorSpec::UNIFORM } else { PriorSpec::Delta(rng.random_range(0.0..2.0 * k)) };
    let norm = if rng.random::<bool>() { TransitionNorm::Rows } else { TransitionNorm::Density };
    let grid = if m == 1 { StateGrid::single_cell(0.0, 2.0 * k)? } else { build_grid(0.0, 2.0 * k, m)? };
    let hmm = GridHmm::new(grid, prior, norm, h)?;
    let sim = SimConfig { h, steps: n, u0: rng.random_range(0.1..1.5) * k, seed: rng.random() };
    let ys = simulate(&lambda, &sim, &mut sim.rng())?.observations;
    Ok((lambda, hmm, ys))
}

fn path_sum_check(v: &VerifySection, seed: u64) -> Check {
    let mut check = Check::new("forward-backward vs path enumeration", v.tolerances.path_sum);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for inst in 0..v.instances {
        let n = rng.random_range(1..=6usize);
        let m = rng.random_range(1..=4usize);
        let label = format!("instance {inst} (N={n}, M={m})");
        if v.budget.check(n, m).is_err() {
            check.skipped += 1;
            // Keep the random stream aligned with unrestricted budgets.
            let _ = random_instance(&mut rng, n, m);
            continue;
        }
        let outcome = random_instance(&mut rng, n, m).and_then(|(lambda, hmm, ys)| {
            let fb = hmm.posteriors(&lambda, &ys, XiStorage::Full)?;
            let bf = brute_force_likelihood(&lambda, &hmm, &ys, &v.budget)?;
            let mut err = (fb.loglik - bf.loglik).abs() / bf.loglik.abs().max(1.0);
            for (x, y) in fb.gamma.iter().zip(bf.gamma.iter()) {
                err = err.max((x - y).abs());
            }
            let slices = fb.initial_pair.iter().chain(&fb.xi);
            for (k, slice) in slices.enumerate() {
                for ((i, j), &x) in slice.indexed_iter() {
                    err = err.max((x - bf.xi[[k, i, j]]).abs());
                }
            }
            Ok(err)
        });
        match outcome {
            Ok(err) => check.record(label, err),
            Err(e) => check.fail(label, e.to_string()),
        }
    }
    check.finish()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub truth: Lambda,
    /// Starting point of the M-step, within 10% of `truth`.
    pub start: Lambda,
    pub u0: f64,
    pub ys: Vec<f64>,
}

/// A synthetic dataset around `truth` whose noise levels are comparable to
/// the cell width of an `m`-cell grid.
pub fn random_dataset(rng: &mut ChaCha8Rng, truth: &Lambda, h: f64, n: usize, m: usize) -> Result<Dataset> {
    let jitter = |rng: &mut ChaCha8Rng, x: f64, w: f64| x * rng.random_range(1.0 - w..1.0 + w);
    let k = jitter(rng, truth.k, 0.3);
    let du = 2.0 * k / m as f64;
    let a = jitter(rng, truth.a, 0.3);
    let star = Lambda::new(
        jitter(rng, truth.r, 0.3).min(0.5 / h),
        k,
        a,
        truth.b + rng.random_range(-2.0..2.0),
        du * rng.random_range(0.5..1.5),
        a.abs() * du * rng.random_range(0.3..1.0),
    )?;
    let mut start = star;
    for p in Param::ALL {
        start.set(p, jitter(rng, star.get(p), 0.1));
    }
    start.validate()?;
    let sim = SimConfig { h, steps: n, u0: k * rng.random_range(0.05..0.3), seed: rng.random() };
    let ys = simulate(&star, &sim, &mut sim.rng())?.observations;
    Ok(Dataset { truth: star, start, u0: sim.u0, ys })
}

/// M-step failures caused by the data (no usable spread along a regressor)
/// rather than by the code under test.
fn undefined_m_step(e: &Error) -> bool {
    matches!(e, Error::Unidentifiable { .. } | Error::CarryingCapacitySign { .. })
}

#[derive(Debug, Clone, Serialize)]
struct GradientRow {
    dataset: usize,
    exact_max_relative: f64,
    verbatim_max_relative: f64,
    verbatim_k_relative: f64,
    variant_gap: f64,
    least_squares_gap: f64,
}

fn max_relative_gap(x: &Lambda, y: &Lambda) -> f64 {
    Param::ALL.iter().map(|&p| (x.get(p) - y.get(p)).abs() / y.get(p).abs().max(1e-300)).fold(0.0, f64::max)
}

/// Gradient and least-squares checks share their synthetic datasets.
fn dataset_checks(config: &RunConfig) -> (Check, Check, Check) {
    let v = &config.verify;
    let tol = v.tolerances;
    let mut exact = Check::new("exact M-step zeroes the auxiliary gradient", tol.gradient);
    let mut verbatim = Check::new("verbatim M-step zeroes the r, a, sigma, tau partials", tol.gradient);
    let mut wls = Check::new("least-squares M-step agrees with the exact variant", tol.least_squares);
    let truth = config.model.truth.unwrap_or(config.model.initial);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    // Draws whose M-step is undefined are replaced, up to a fixed budget.
    let mut d = 0;
    while exact.ran < v.datasets && d < 3 * v.datasets {
        let label = format!("dataset {d}");
        d += 1;
        let drawn = random_dataset(&mut rng, &truth, config.sim.h, v.steps, v.cells);
        let outcome = drawn.and_then(|Dataset { start: lambda, u0, ys, .. }| -> Result<GradientRow> {
            let prior = match config.grid.prior {
                PriorSpec::Delta(_) => PriorSpec::Delta(u0),
                p => p,
            };
            let spec = GridSpec { cells: v.cells, prior, ..config.grid };
            let hmm = GridHmm::from_spec(&spec, lambda.k, config.sim.h)?;
            let fb = hmm.posteriors(&lambda, &ys, XiStorage::TotalOnly)?;
            let stats = accumulate_stats(&ys, &hmm.grid, &fb, hmm.h)?;
            let l_exact = reestimate(&stats, &lambda, Variant::ExactCriticalPoint)?;
            let l_verb = reestimate(&stats, &lambda, Variant::PaperVerbatim)?;
            let l_wls = wls_mstep(&stats)?;
            let g_exact = fd_grad_q(&lambda, &l_exact, &ys, &hmm, v.fd_step)?;
            let g_verb = fd_grad_q(&lambda, &l_verb, &ys, &hmm, v.fd_step)?;
            Ok(GradientRow {
                dataset: d - 1,
                exact_max_relative: g_exact.max_relative(&Param::ALL),
                verbatim_max_relative: g_verb.max_relative(&[Param::R, Param::A, Param::Sigma, Param::Tau]),
                verbatim_k_relative: g_verb.relative()[Param::K.index()],
                variant_gap: max_relative_gap(&l_verb, &l_exact),
                least_squares_gap: max_relative_gap(&l_wls, &l_exact),
            })
        });
        match outcome {
            Ok(row) => {
                exact.record(label.clone(), row.exact_max_relative);
                verbatim.record(label.clone(), row.verbatim_max_relative);
                wls.record(label, row.least_squares_gap);
                rows.push(row);
            }
            Err(e) if undefined_m_step(&e) => {
                for c in [&mut exact, &mut verbatim, &mut wls] {
                    c.skipped += 1;
                }
                rejected.push(format!("{label}: {e}"));
            }
            Err(e) => {
                exact.fail(label.clone(), e.to_string());
                verbatim.fail(label.clone(), e.to_string());
                wls.fail(label, e.to_string());
            }
        }
    }
    let k_residual = rows.iter().map(|r| r.verbatim_k_relative).fold(0.0, f64::max);
    let gap = rows.iter().map(|r| r.variant_gap).fold(0.0, f64::max);
    verbatim.details = Some(serde_json::json!({
        "max_k_gradient_relative": k_residual,
        "max_variant_gap": gap,
        "datasets": rows,
        "rejected": rejected,
    }));
    (exact.finish(), verbatim.finish(), wls.finish())
}

fn running_average_check(v: &VerifySection, seed: u64) -> Check {
    let mut check = Check::new("inverse-n recursion equals the running mean", v.tolerances.running_average);
    if v.average_steps == 0 {
        return check.finish();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floors = Floors { sigma: 0.0, tau: 0.0, k: 0.0 };
    let mut lambda = Lambda::new(1.0, 1.0, 1.0, 1.0, 1.0, 1.0).expect("unit parameters are valid");
    let mut sums = [0.0; 6];
    for n in 1..=v.average_steps as u64 {
        let s: [f64; 6] = [
            rng.random_range(0.1..2.0),
            rng.random_range(0.005..0.02),
            rng.random_range(0.5..3.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(0.1..4.0),
            rng.random_range(0.1..4.0),
        ];
        for (acc, x) in sums.iter_mut().zip(&s) {
            *acc += x;
        }
        let stats = StepStatistics(s.map(Some));
        lambda = apply_statistics(&lambda, &stats, epsilon(&StepSchedule::InverseN, n), &floors).0;
    }
    let got = lambda.transformed();
    let err = (0..6)
        .map(|i| {
            let mean = sums[i] / v.average_steps as f64;
            (got[i] - mean).abs() / mean.abs()
        })
        .fold(0.0, f64::max);
    check.record(format!("{} injected statistics", v.average_steps), err);
    check.finish()
}

pub fn run(config: &RunConfig) -> VerifyReport {
    let (exact, verbatim, wls) = dataset_checks(config);
    let checks = vec![
        path_sum_check(&config.verify, config.seed),
        exact,
        verbatim,
        wls,
        running_average_check(&config.verify, config.seed),
    ];
    let passed = checks.iter().all(|c| c.status != Status::Fail);
    VerifyReport { passed, checks, provenance: None }
}
