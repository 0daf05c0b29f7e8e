//! Online adaptive recursive estimation.
//!
//! Every observation moves each parameter a step `ε_n` toward a per-step
//! statistic `S_n`:
//!
//! ```text
//! θ_n = (1 - ε_n) θ_{n-1} + ε_n S_n
//! ```
//!
//! in the coordinates `(r, 1/K, a, b, σ², τ²)`. `S_n` is the single-step
//! version of the batch re-estimation formula, weighted by the one-step
//! pairwise filtered posterior under `λ_{n-1}`. With `ε_n = 1/n` and fixed
//! statistics the recursion is exactly the running mean of `S_1..S_n`.

use log::debug;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::aig::{FitReport, Floors, Iterate, StopReason, Variant};
use crate::error::{Error, Param, Result};
use crate::fb::pair_posterior;
use crate::grid::gaussian_ln_pdf;
use crate::hmm::GridHmm;
use crate::model::Lambda;

/// Statistic denominators at or below this are treated as degenerate.
pub const DENOMINATOR_MIN: f64 = 1e-30;

/// Gain sequence `ε_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepSchedule {
    /// `ε_n = 1/n`.
    InverseN,
    /// `ε_n = 1/(n (ln n)^k)` from `n0` on, `1` before. `Σ ε_n` diverges
    /// only for `k = 1`.
    Bertrand {
        k: f64,
        #[serde(default = "default_n0")]
        n0: u64,
    },
    Constant {
        epsilon: f64,
    },
}

fn default_n0() -> u64 {
    2
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Bertrand { k: 1.0, n0: 2 }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::InverseN => Ok(()),
            StepSchedule::Bertrand { k, n0 } => {
                if !(k.is_finite() && k >= 1.0) {
                    return Err(Error::Config(format!("bertrand exponent must be >= 1, got {k}")));
                }
                if n0 < 2 {
                    return Err(Error::Config(format!("bertrand start index must be >= 2, got {n0}")));
                }
                Ok(())
            }
            StepSchedule::Constant { epsilon } => {
                if epsilon > 0.0 && epsilon <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("constant gain must lie in (0, 1], got {epsilon}")))
                }
            }
        }
    }
}

/// `ε_n` for `n >= 1`, clipped to `(0, 1]`.
pub fn epsilon(schedule: &StepSchedule, n: u64) -> f64 {
    let n = n.max(1);
    let raw = match *schedule {
        StepSchedule::InverseN => 1.0 / n as f64,
        StepSchedule::Bertrand { k, n0 } => {
            if n < n0 {
                1.0
            } else {
                let nf = n as f64;
                1.0 / (nf * nf.ln().powf(k))
            }
        }
        StepSchedule::Constant { epsilon } => epsilon,
    };
    raw.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Per-parameter count of steps whose update was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SkipCounts {
    pub r: u64,
    #[serde(rename = "K")]
    pub k: u64,
    pub a: u64,
    pub b: u64,
    pub sigma: u64,
    pub tau: u64,
}

impl SkipCounts {
    pub fn get(&self, p: Param) -> u64 {
        match p {
            Param::R => self.r,
            Param::K => self.k,
            Param::A => self.a,
            Param::B => self.b,
            Param::Sigma => self.sigma,
            Param::Tau => self.tau,
        }
    }

    fn bump(&mut self, p: Param) {
        match p {
            Param::R => self.r += 1,
            Param::K => self.k += 1,
            Param::A => self.a += 1,
            Param::B => self.b += 1,
            Param::Sigma => self.sigma += 1,
            Param::Tau => self.tau += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AREState {
    pub n: u64,
    pub lambda: Lambda,
    /// Filtered distribution of the current state over grid cells.
    pub filter: Vec<f64>,
    pub prev_filter: Vec<f64>,
    /// `Σ ln p(y_n | y_1..y_{n-1})` under the time-varying parameters.
    pub log_predictive: f64,
    pub skips: SkipCounts,
}

/// Per-step statistics in the coordinates `(r, 1/K, a, b, σ², τ²)`; `None`
/// marks a degenerate denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStatistics(pub [Option<f64>; 6]);

pub fn are_init(lambda0: &Lambda, hmm: &GridHmm) -> Result<AREState> {
    lambda0.validate()?;
    Ok(AREState {
        n: 0,
        lambda: *lambda0,
        filter: hmm.prior.weights.clone(),
        prev_filter: hmm.prior.weights.clone(),
        log_predictive: 0.0,
        skips: SkipCounts::default(),
    })
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den.abs() <= DENOMINATOR_MIN || !den.is_finite() || !num.is_finite() {
        None
    } else {
        Some(num / den)
    }
}

/// Single-step statistics from the normalized pairwise weight
/// `w[i][j] ≈ P(u_{n-1} = m_i, u_n = m_j | y_1..y_n)`.
///
/// For `1/K` the paper-verbatim form zeroes the plain residual sum; the
/// exact form zeroes the `u_{n-1}^2`-weighted one, which is the critical
/// point of the step's log-density in `1/K`.
pub fn step_statistics(
    w: &Array2<f64>,
    points: &[f64],
    y: f64,
    prev: &Lambda,
    h: f64,
    variant: Variant,
) -> StepStatistics {
    let inv_k = 1.0 / prev.k;
    let (r, a, b) = (prev.r, prev.a, prev.b);
    let mut r_num = 0.0;
    let mut r_den = 0.0;
    let mut k_num = 0.0;
    let mut k_den = 0.0;
    let mut s2 = 0.0;
    for ((i, j), &wij) in w.indexed_iter() {
        if wij == 0.0 {
            continue;
        }
        let x = points[i];
        let d = points[j] - x;
        let g = 1.0 - inv_k * x;
        r_num += wij * x * d * g;
        r_den += wij * x * x * g * g;
        let resid_k = d - h * r * x;
        match variant {
            Variant::PaperVerbatim => {
                k_num += wij * resid_k;
                k_den += wij * x * x;
            }
            Variant::ExactCriticalPoint => {
                k_num += wij * x * x * resid_k;
                k_den += wij * x * x * x * x;
            }
        }
        let e = d - h * r * x * g;
        s2 += wij * e * e;
    }
    let unary = w.sum_axis(ndarray::Axis(0));
    let mut a_num = 0.0;
    let mut a_den = 0.0;
    let mut b_num = 0.0;
    let mut mass = 0.0;
    let mut t2 = 0.0;
    for (&wj, &m) in unary.iter().zip(points) {
        a_num += wj * (y - b) * m;
        a_den += wj * m * m;
        b_num += wj * (y - a * m);
        mass += wj;
        let e = y - a * m - b;
        t2 += wj * e * e;
    }
    StepStatistics([
        ratio(r_num, h * r_den),
        ratio(-k_num, h * r * k_den),
        ratio(a_num, a_den),
        ratio(b_num, mass),
        ratio(s2, mass),
        ratio(t2, mass),
    ])
}

/// Convex-combination update in transformed coordinates, then floors.
/// Returns the new parameters and which components were skipped.
pub fn apply_statistics(prev: &Lambda, stats: &StepStatistics, eps: f64, floors: &Floors) -> (Lambda, [bool; 6]) {
    let old = prev.transformed();
    let mut t = old;
    let mut skipped = [false; 6];
    for (idx, s) in stats.0.iter().enumerate() {
        match s {
            Some(s) => t[idx] = (1.0 - eps) * old[idx] + eps * s,
            None => skipped[idx] = true,
        }
    }
    // A nonpositive 1/K has no carrying capacity; keep the previous K.
    if !(t[1] > 0.0) || !t[1].is_finite() {
        t[1] = old[1];
        skipped[1] = true;
    }
    let lambda = Lambda {
        r: t[0],
        k: (1.0 / t[1]).max(floors.k),
        a: t[2],
        b: t[3],
        sigma: t[4].max(0.0).sqrt().max(floors.sigma),
        tau: t[5].max(0.0).sqrt().max(floors.tau),
    };
    (lambda, skipped)
}

/// Consumes one observation.
pub fn are_step(
    state: &AREState,
    y: f64,
    hmm: &GridHmm,
    schedule: &StepSchedule,
    variant: Variant,
) -> Result<AREState> {
    let n = state.n + 1;
    if !y.is_finite() {
        return Err(Error::Domain(format!("observation {n} is not finite")));
    }
    let prev = state.lambda;
    let points = hmm.grid.points();
    let t = hmm.transitions(&prev)?;

    let log_e: Vec<f64> = points.iter().map(|&m| gaussian_ln_pdf(y, prev.a * m + prev.b, prev.tau)).collect();
    let offset = log_e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = Array1::from_iter(log_e.iter().map(|v| (v - offset).exp()));
    let filter = Array1::from(state.filter.clone());

    let predictive_mass = filter.dot(&t.matrix).dot(&e);
    let mut w = Array2::zeros(t.matrix.raw_dim());
    if !offset.is_finite() || pair_posterior(filter.view(), &t.matrix, e.view(), &mut w).is_err() {
        return Err(Error::Underflow { step: n as usize });
    }

    let stats = step_statistics(&w, points, y, &prev, hmm.h, variant);
    let eps = epsilon(schedule, n);
    let floors = Floors::for_cell_width(hmm.grid.cell_width());
    let (lambda, skipped) = apply_statistics(&prev, &stats, eps, &floors);
    let mut skips = state.skips;
    for (p, &s) in Param::ALL.iter().zip(&skipped) {
        if s {
            debug!("step {n}: degenerate statistic for {p}, update skipped");
            skips.bump(*p);
        }
    }

    let next_filter = w.sum_axis(ndarray::Axis(0)).to_vec();
    Ok(AREState {
        n,
        lambda,
        filter: next_filter,
        prev_filter: state.filter.clone(),
        log_predictive: state.log_predictive + predictive_mass.ln() + offset,
        skips,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AreOptions {
    pub schedule: StepSchedule,
    pub variant: Variant,
    /// Record an iterate every `stride` steps (and at the last step).
    pub stride: u64,
}

impl Default for AreOptions {
    fn default() -> Self {
        AreOptions { schedule: StepSchedule::default(), variant: Variant::ExactCriticalPoint, stride: 100 }
    }
}

/// Incremental driver: feed observations one at a time, then take the report.
#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    hmm: GridHmm,
    options: AreOptions,
    state: AREState,
    report: FitReport,
    failed: bool,
}

impl OnlineEstimator {
    pub fn new(lambda0: &Lambda, hmm: &GridHmm, options: AreOptions) -> Result<Self> {
        options.schedule.validate()?;
        if options.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let state = are_init(lambda0, hmm)?;
        let report = FitReport {
            variant: options.variant,
            iterates: vec![Iterate::new(0, lambda0, 0.0)],
            converged: false,
            stop_reason: StopReason::EndOfStream,
            error: None,
            grid_rebuilds: Vec::new(),
            schedule: Some(options.schedule),
            skips: Some(SkipCounts::default()),
            provenance: None,
        };
        Ok(OnlineEstimator { hmm: hmm.clone(), options, state, report, failed: false })
    }

    pub fn state(&self) -> &AREState {
        &self.state
    }

    /// Consumes one observation. After an error the estimator stays stopped.
    pub fn push(&mut self, y: f64) -> Result<()> {
        if self.failed {
            return Err(Error::Domain("estimator stopped after an earlier error".into()));
        }
        match are_step(&self.state, y, &self.hmm, &self.options.schedule, self.options.variant) {
            Ok(next) => {
                self.state = next;
                if self.state.n.is_multiple_of(self.options.stride) {
                    self.record();
                }
                Ok(())
            }
            Err(e) => {
                self.failed = true;
                self.record();
                self.report.stop_reason = StopReason::Error;
                self.report.error = Some(e.to_string());
                Err(e)
            }
        }
    }

    fn record(&mut self) {
        let n = self.state.n as usize;
        if self.report.iterates.last().map(|it| it.iter) != Some(n) {
            self.report.iterates.push(Iterate::new(n, &self.state.lambda, self.state.log_predictive));
        }
    }

    pub fn finish(mut self) -> FitReport {
        self.record();
        self.report.skips = Some(self.state.skips);
        self.report
    }
}

/// Runs the recursive estimator over a whole stream.
pub fn fit_are(ys: &[f64], lambda0: &Lambda, hmm: &GridHmm, options: &AreOptions) -> Result<FitReport> {
    if ys.is_empty() {
        return Err(Error::Domain("empty observation stream".into()));
    }
    let mut est = OnlineEstimator::new(lambda0, hmm, *options)?;
    for &y in ys {
        if est.push(y).is_err() {
            break;
        }
    }
    Ok(est.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, PriorSpec, TransitionNorm};

    fn hmm(m: usize, prior: PriorSpec) -> GridHmm {
        GridHmm::new(build_grid(0.0, 200.0, m).unwrap(), prior, TransitionNorm::Rows, 0.05).unwrap()
    }

    fn truth() -> Lambda {
        Lambda::new(0.8, 100.0, 2.0, 5.0, 1.0, 0.5).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon(&StepSchedule::InverseN, 4), 0.25);
        assert_eq!(epsilon(&StepSchedule::InverseN, 1), 1.0);
        let b = StepSchedule::Bertrand { k: 1.0, n0: 2 };
        let e8 = epsilon(&b, 8);
        assert!((e8 - 1.0 / (8.0 * 8f64.ln())).abs() < 1e-15);
        assert!((e8 - 0.0601).abs() < 1e-4);
        assert_eq!(epsilon(&b, 1), 1.0);
        assert_eq!(epsilon(&StepSchedule::Constant { epsilon: 0.3 }, 99), 0.3);
    }

    #[test]
    fn epsilon_is_nonincreasing_and_in_unit_interval() {
        for s in
            [StepSchedule::InverseN, StepSchedule::Bertrand { k: 1.0, n0: 2 }, StepSchedule::Bertrand { k: 2.5, n0: 5 }]
        {
            let mut last = 1.0;
            for n in 1..5000 {
                let e = epsilon(&s, n);
                assert!(e > 0.0 && e <= 1.0);
                assert!(e <= last, "{s:?} n={n}");
                last = e;
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::Constant { epsilon: 0.0 }.validate().is_err());
        assert!(StepSchedule::Constant { epsilon: 1.0 }.validate().is_ok());
        assert!(StepSchedule::Bertrand { k: 0.5, n0: 2 }.validate().is_err());
        assert!(StepSchedule::Bertrand { k: 1.0, n0: 1 }.validate().is_err());
    }

    #[test]
    fn schedule_serde_shape() {
        let s: StepSchedule = serde_json::from_str(r#"{"kind":"bertrand","k":1.0}"#).unwrap();
        assert_eq!(s, StepSchedule::Bertrand { k: 1.0, n0: 2 });
        let s: StepSchedule = serde_json::from_str(r#"{"kind":"inverse-n"}"#).unwrap();
        assert_eq!(s, StepSchedule::InverseN);
    }

    #[test]
    fn init_examples() {
        let st = are_init(&truth(), &hmm(4, PriorSpec::UNIFORM)).unwrap();
        assert_eq!(st.n, 0);
        assert_eq!(st.filter, vec![0.25; 4]);
        let st = are_init(&truth(), &hmm(4, PriorSpec::Delta(60.0))).unwrap();
        assert_eq!(st.filter, vec![0.0, 1.0, 0.0, 0.0]);
        let bad = Lambda { sigma: 0.0, ..truth() };
        assert!(are_init(&bad, &hmm(4, PriorSpec::UNIFORM)).is_err());
    }

    #[test]
    fn constant_one_replaces_with_statistic() {
        let prev = truth();
        let stats = StepStatistics([Some(0.5), Some(0.02), Some(1.5), Some(3.0), Some(4.0), Some(0.09)]);
        let (l, skipped) = apply_statistics(&prev, &stats, 1.0, &Floors::for_cell_width(1.0));
        assert_eq!(skipped, [false; 6]);
        assert_eq!(l.r, 0.5);
        assert!((l.k - 50.0).abs() < 1e-12);
        assert_eq!((l.a, l.b), (1.5, 3.0));
        assert!((l.sigma - 2.0).abs() < 1e-15);
        assert!((l.tau - 0.3).abs() < 1e-15);
    }

    #[test]
    fn degenerate_denominators_skip_components() {
        let prev = truth();
        let stats = StepStatistics([None, Some(-0.5), Some(1.5), None, Some(4.0), Some(0.09)]);
        let (l, skipped) = apply_statistics(&prev, &stats, 0.5, &Floors::for_cell_width(1.0));
        assert_eq!(skipped, [true, true, false, true, false, false]);
        assert_eq!(l.r, prev.r);
        assert_eq!(l.k, prev.k);
        assert_eq!(l.b, prev.b);
    }

    #[test]
    fn filter_stays_normalized() {
        let h = hmm(16, PriorSpec::Delta(5.0));
        let cfg = crate::model::SimConfig { h: 0.05, steps: 200, u0: 5.0, seed: 4 };
        let traj = crate::model::simulate(&truth(), &cfg, &mut cfg.rng()).unwrap();
        let mut st = are_init(&truth(), &h).unwrap();
        for &y in &traj.observations {
            st = are_step(&st, y, &h, &StepSchedule::default(), Variant::ExactCriticalPoint).unwrap();
            let s: f64 = st.filter.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(st.filter.iter().all(|&f| f >= 0.0));
            st.lambda.validate().unwrap();
        }
        assert_eq!(st.n, 200);
    }

    #[test]
    fn single_observation_report() {
        let rep = fit_are(&[15.0], &truth(), &hmm(8, PriorSpec::Delta(5.0)), &AreOptions::default()).unwrap();
        let iters: Vec<usize> = rep.iterates.iter().map(|i| i.iter).collect();
        assert_eq!(iters, vec![0, 1]);
        assert_eq!(rep.stop_reason, StopReason::EndOfStream);
    }
}
