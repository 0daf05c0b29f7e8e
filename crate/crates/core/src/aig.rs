//! Offline global iterative estimation (batch EM over a block of data).
//!
//! Each outer iteration computes smoothed posteriors under the current
//! parameters, collapses them into [`SufficientStats`] and re-estimates all
//! six parameters from the critical points of the auxiliary function
//!
//! ```text
//! Q(λ, λ') = Σ_n Σ_i γ_n(i) ln p(y_n | m_i, λ')
//!          + Σ_n Σ_ij ξ_n(i, j) ln p(m_j | m_i, λ')
//!          + Σ_i P(u_0 = m_i | y) ln π_i
//! ```
//!
//! using the Gaussian log-densities of the state and observation equations.
//! Two M-steps are available: the displayed per-parameter formulas iterated
//! as an inner fixed point ([`Variant::PaperVerbatim`]) and the joint
//! least-squares solution ([`Variant::ExactCriticalPoint`]).

use log::info;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Param, Result};
use crate::fb::{FBResult, XiStorage};
use crate::grid::{gaussian_ln_pdf, InitialPrior, StateGrid};
use crate::hmm::GridHmm;
use crate::model::{logistic_mean, Lambda, SIGMA_FLOOR, TAU_FLOOR};

/// Relative condition number above which a 2x2 Gram matrix is singular.
pub const MAX_CONDITION: f64 = 1e12;

const INNER_TOL: f64 = 1e-10;
const INNER_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PaperVerbatim,
    #[default]
    ExactCriticalPoint,
}

/// Posterior-weighted sums over one observation block, kept in a form from
/// which every numerator and denominator of the re-estimation formulas can be
/// evaluated for any trial parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub h: f64,
    pub points: Vec<f64>,
    pub cell_width: f64,
    /// `Σ_n ξ_n(i, j)`: expected transition counts between cells.
    pub pair: Array2<f64>,
    /// `Σ_n γ_n(i)`.
    pub cell_weight: Vec<f64>,
    /// Posterior-weighted mean of the observations attributed to each cell.
    pub cell_mean_y: Vec<f64>,
    /// `Σ_n γ_n(i) (y_n - cell_mean_y[i])^2`.
    pub cell_scatter_y: Vec<f64>,
}

/// Moments of the affine observation regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMoments {
    pub suu: f64,
    pub suy: f64,
    pub su: f64,
    pub sy: f64,
    pub s1: f64,
}

pub fn accumulate_stats(ys: &[f64], grid: &StateGrid, fb: &FBResult, h: f64) -> Result<SufficientStats> {
    let m = grid.len();
    if fb.gamma.nrows() != ys.len() || fb.gamma.ncols() != m || fb.xi_total.dim() != (m, m) {
        return Err(Error::Domain("posteriors do not match the data or grid".into()));
    }
    let mut cell_weight = vec![0.0; m];
    let mut weighted_y = vec![0.0; m];
    for (n, (row, &y)) in fb.gamma.rows().into_iter().zip(ys).enumerate() {
        for (i, &g) in row.iter().enumerate() {
            cell_weight[i] += g;
            weighted_y[i] += g * y;
        }
        if !weighted_y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { term: format!("gamma-weighted observation sum at step {}", n + 1) });
        }
    }
    let cell_mean_y: Vec<f64> =
        cell_weight.iter().zip(&weighted_y).map(|(&w, &s)| if w > 0.0 { s / w } else { 0.0 }).collect();
    let mut cell_scatter_y = vec![0.0; m];
    for (row, &y) in fb.gamma.rows().into_iter().zip(ys) {
        for (i, &g) in row.iter().enumerate() {
            let d = y - cell_mean_y[i];
            cell_scatter_y[i] += g * d * d;
        }
    }
    if !cell_scatter_y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { term: "observation scatter".into() });
    }
    if !fb.xi_total.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { term: "pairwise posterior total".into() });
    }
    Ok(SufficientStats {
        h,
        points: grid.points().to_vec(),
        cell_width: grid.cell_width(),
        pair: fb.xi_total.clone(),
        cell_weight,
        cell_mean_y,
        cell_scatter_y,
    })
}

impl SufficientStats {
    /// Total posterior mass of the unary terms (the number of observations).
    pub fn obs_weight(&self) -> f64 {
        self.cell_weight.iter().sum()
    }

    /// Total posterior mass of the pairwise terms (number of transitions).
    pub fn pair_weight(&self) -> f64 {
        self.pair.sum()
    }

    /// Same statistics with every posterior weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        SufficientStats {
            pair: &self.pair * c,
            cell_weight: self.cell_weight.iter().map(|w| w * c).collect(),
            cell_scatter_y: self.cell_scatter_y.iter().map(|w| w * c).collect(),
            ..self.clone()
        }
    }

    fn pair_sum(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let mut total = 0.0;
        for ((i, j), &w) in self.pair.indexed_iter() {
            if w != 0.0 {
                let x = self.points[i];
                total += w * f(x, self.points[j] - x);
            }
        }
        total
    }

    /// `Σ ξ x (u_n - x)(1 - x/K)` with `x = u_{n-1}`.
    pub fn r_numerator(&self, inv_k: f64) -> f64 {
        self.pair_sum(|x, d| x * d * (1.0 - inv_k * x))
    }

    /// `Σ ξ x^2 (1 - x/K)^2`.
    pub fn r_denominator(&self, inv_k: f64) -> f64 {
        self.pair_sum(|x, _| {
            let s = x * (1.0 - inv_k * x);
            s * s
        })
    }

    /// `Σ ξ (u_n - x - h r x)`.
    pub fn k_numerator(&self, r: f64) -> f64 {
        let h = self.h;
        self.pair_sum(|x, d| d - h * r * x)
    }

    /// `Σ ξ h r x^2`.
    pub fn k_denominator(&self, r: f64) -> f64 {
        let h = self.h;
        self.pair_sum(|x, _| h * r * x * x)
    }

    pub fn affine_moments(&self) -> AffineMoments {
        let mut mo = AffineMoments { suu: 0.0, suy: 0.0, su: 0.0, sy: 0.0, s1: 0.0 };
        for ((&m, &w), &ybar) in self.points.iter().zip(&self.cell_weight).zip(&self.cell_mean_y) {
            mo.suu += w * m * m;
            mo.suy += w * m * ybar;
            mo.su += w * m;
            mo.sy += w * ybar;
            mo.s1 += w;
        }
        mo
    }

    /// `Σ ξ (u_n - u_{n-1} - h r u_{n-1}(1 - u_{n-1}/K))^2`.
    pub fn state_residual_ss(&self, r: f64, inv_k: f64) -> f64 {
        let h = self.h;
        self.pair_sum(|x, d| {
            let e = x + d - logistic_mean(x, r, inv_k, h);
            e * e
        })
    }

    /// `Σ γ (y_n - a u_n - b)^2`.
    pub fn obs_residual_ss(&self, a: f64, b: f64) -> f64 {
        self.points
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let e = self.cell_mean_y[i] - a * m - b;
                self.cell_scatter_y[i] + self.cell_weight[i] * e * e
            })
            .sum()
    }

    /// The offset formula with the gain held at `a`: `Σ γ (y - a u) / Σ γ`.
    pub fn affine_offset(&self, a: f64) -> f64 {
        let mo = self.affine_moments();
        (mo.sy - a * mo.su) / mo.s1
    }
}

/// Lower bounds applied to every re-estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Floors {
    pub sigma: f64,
    pub tau: f64,
    pub k: f64,
}

impl Floors {
    pub fn for_cell_width(du: f64) -> Self {
        Floors { sigma: SIGMA_FLOOR, tau: TAU_FLOOR, k: du }
    }
}

/// Solves the symmetric 2x2 system `g x = rhs` after Jacobi scaling, or
/// reports the relative condition number when it exceeds [`MAX_CONDITION`].
pub(crate) fn solve_sym2(g: [[f64; 2]; 2], rhs: [f64; 2]) -> Result<[f64; 2], f64> {
    if !(g[0][0] > 0.0 && g[1][1] > 0.0) {
        return Err(f64::INFINITY);
    }
    let s0 = g[0][0].sqrt();
    let s1 = g[1][1].sqrt();
    let rho = g[0][1] / (s0 * s1);
    let cond = (1.0 + rho.abs()) / (1.0 - rho.abs());
    if !(cond.is_finite() && cond <= MAX_CONDITION) {
        return Err(cond);
    }
    let b0 = rhs[0] / s0;
    let b1 = rhs[1] / s1;
    let det = 1.0 - rho * rho;
    let x0 = (b0 - rho * b1) / det;
    let x1 = (b1 - rho * b0) / det;
    Ok([x0 / s0, x1 / s1])
}

pub fn reestimate(stats: &SufficientStats, lambda: &Lambda, variant: Variant) -> Result<Lambda> {
    let floors = Floors::for_cell_width(stats.cell_width);
    let (a, b) = match variant {
        Variant::ExactCriticalPoint => affine_joint(stats)?,
        Variant::PaperVerbatim => affine_alternating(stats, lambda)?,
    };
    let (r, k) = match variant {
        Variant::ExactCriticalPoint => state_joint(stats)?,
        Variant::PaperVerbatim => state_alternating(stats, lambda)?,
    };
    let k = k.max(floors.k);
    let sigma =
        variance(stats.state_residual_ss(r, 1.0 / k), stats.pair_weight(), Param::Sigma)?.sqrt().max(floors.sigma);
    let tau = variance(stats.obs_residual_ss(a, b), stats.obs_weight(), Param::Tau)?.sqrt().max(floors.tau);
    let out = Lambda { r, k, a, b, sigma, tau };
    for p in Param::ALL {
        if !out.get(p).is_finite() {
            return Err(Error::NonFinite { term: format!("re-estimate of {p}") });
        }
    }
    Ok(out)
}

fn variance(ss: f64, weight: f64, param: Param) -> Result<f64> {
    if !(weight > 0.0) {
        return Err(Error::Unidentifiable { param, reason: "no posterior mass".into() });
    }
    Ok(ss / weight)
}

fn affine_joint(stats: &SufficientStats) -> Result<(f64, f64)> {
    let mo = stats.affine_moments();
    solve_sym2([[mo.suu, mo.su], [mo.su, mo.s1]], [mo.suy, mo.sy]).map(|[a, b]| (a, b)).map_err(|cond| {
        Error::Unidentifiable {
            param: Param::A,
            reason: format!("affine regression Gram matrix has relative condition {cond:e}"),
        }
    })
}

/// Solves for `θ1 = h r`, `θ2 = h r / K` in `u_n - u_{n-1} ≈ θ1 x - θ2 x^2`.
fn state_joint(stats: &SufficientStats) -> Result<(f64, f64)> {
    let sx2 = stats.pair_sum(|x, _| x * x);
    let sx3 = stats.pair_sum(|x, _| x * x * x);
    let sx4 = stats.pair_sum(|x, _| x * x * x * x);
    let sxd = stats.pair_sum(|x, d| x * d);
    let sx2d = stats.pair_sum(|x, d| x * x * d);
    let [t1, t2] = solve_sym2([[sx2, -sx3], [-sx3, sx4]], [sxd, -sx2d]).map_err(|cond| Error::Unidentifiable {
        param: if sx2 > 0.0 { Param::K } else { Param::R },
        reason: format!("state regression Gram matrix has relative condition {cond:e}"),
    })?;
    if !(t2 > 0.0) {
        return Err(Error::CarryingCapacitySign { theta2: t2 });
    }
    Ok((t1 / stats.h, t1 / t2))
}

fn rel_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / new.abs().max(f64::MIN_POSITIVE)
}

/// Alternates the displayed offset and gain formulas, gain last.
fn affine_alternating(stats: &SufficientStats, lambda: &Lambda) -> Result<(f64, f64)> {
    let mo = stats.affine_moments();
    if !(mo.suu > 0.0) {
        return Err(Error::Unidentifiable { param: Param::A, reason: "Σγ u^2 is zero".into() });
    }
    if !(mo.s1 > 0.0) {
        return Err(Error::Unidentifiable { param: Param::B, reason: "no posterior mass".into() });
    }
    let (mut a, mut b) = (lambda.a, lambda.b);
    for _ in 0..INNER_MAX_ITER {
        let b_new = (mo.sy - a * mo.su) / mo.s1;
        let a_new = (mo.suy - b_new * mo.su) / mo.suu;
        let done = rel_change(a_new, a) <= INNER_TOL && rel_change(b_new, b) <= INNER_TOL;
        a = a_new;
        b = b_new;
        if done {
            break;
        }
    }
    Ok((a, b))
}

/// Alternates the displayed `1/K` and `r` formulas, `r` last.
fn state_alternating(stats: &SufficientStats, lambda: &Lambda) -> Result<(f64, f64)> {
    let h = stats.h;
    let (mut r, mut inv_k) = (lambda.r, 1.0 / lambda.k);
    for _ in 0..INNER_MAX_ITER {
        let kd = stats.k_denominator(r);
        if kd == 0.0 || !kd.is_finite() {
            return Err(Error::Unidentifiable { param: Param::K, reason: "Σξ h r u^2 is zero".into() });
        }
        let inv_k_new = -stats.k_numerator(r) / kd;
        let rd = h * stats.r_denominator(inv_k_new);
        if !(rd > 0.0) || !rd.is_finite() {
            return Err(Error::Unidentifiable { param: Param::R, reason: "Σξ u^2 (1 - u/K)^2 is zero".into() });
        }
        let r_new = stats.r_numerator(inv_k_new) / rd;
        let done = rel_change(r_new, r) <= INNER_TOL && rel_change(inv_k_new, inv_k) <= INNER_TOL;
        r = r_new;
        inv_k = inv_k_new;
        if done {
            break;
        }
    }
    if !(inv_k > 0.0) {
        return Err(Error::CarryingCapacitySign { theta2: h * r * inv_k });
    }
    Ok((r, 1.0 / inv_k))
}

/// The auxiliary function `λ' ↦ Q(λ, λ') / L(y | λ)` for fixed posteriors.
#[derive(Debug, Clone)]
pub struct QFunction<'a> {
    ys: &'a [f64],
    points: &'a [f64],
    prior: &'a InitialPrior,
    h: f64,
    gamma: &'a Array2<f64>,
    initial: Option<&'a Array2<f64>>,
    pair: &'a Array2<f64>,
}

impl<'a> QFunction<'a> {
    pub fn new(ys: &'a [f64], hmm: &'a GridHmm, fb: &'a FBResult) -> Self {
        QFunction {
            ys,
            points: hmm.grid.points(),
            prior: &hmm.prior,
            h: hmm.h,
            gamma: &fb.gamma,
            initial: fb.initial_pair.as_ref(),
            pair: &fb.xi_total,
        }
    }

    pub fn eval(&self, lp: &Lambda) -> f64 {
        let mut q = 0.0;
        let start = match self.initial {
            Some(pair) => pair.sum_axis(Axis(1)),
            None => self.gamma.row(0).to_owned(),
        };
        for (&w, &pi) in start.iter().zip(&self.prior.weights) {
            if w > 0.0 {
                q += w * pi.ln();
            }
        }
        for (row, &y) in self.gamma.rows().into_iter().zip(self.ys) {
            for (&w, &m) in row.iter().zip(self.points) {
                if w > 0.0 {
                    q += w * gaussian_ln_pdf(y, lp.a * m + lp.b, lp.tau);
                }
            }
        }
        let inv_k = 1.0 / lp.k;
        for ((i, j), &w) in self.pair.indexed_iter() {
            if w > 0.0 {
                let mean = logistic_mean(self.points[i], lp.r, inv_k, self.h);
                q += w * gaussian_ln_pdf(self.points[j], mean, lp.sigma);
            }
        }
        q
    }
}

/// Normalized auxiliary function with posteriors computed under `lambda`.
pub fn q_value(lambda: &Lambda, lambda_prime: &Lambda, ys: &[f64], hmm: &GridHmm) -> Result<f64> {
    lambda_prime.validate()?;
    let fb = hmm.posteriors(lambda, ys, XiStorage::TotalOnly)?;
    Ok(QFunction::new(ys, hmm, &fb).eval(lambda_prime))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Tolerance,
    MaxIterations,
    EndOfStream,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub iter: usize,
    pub r: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub tau: f64,
    pub loglik: f64,
}

impl Iterate {
    pub fn new(iter: usize, lambda: &Lambda, loglik: f64) -> Self {
        Iterate {
            iter,
            r: lambda.r,
            k: lambda.k,
            a: lambda.a,
            b: lambda.b,
            sigma: lambda.sigma,
            tau: lambda.tau,
            loglik,
        }
    }

    pub fn lambda(&self) -> Lambda {
        Lambda { r: self.r, k: self.k, a: self.a, b: self.b, sigma: self.sigma, tau: self.tau }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRebuild {
    pub iter: usize,
    pub u_max: f64,
}

/// Result of an offline or online fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub variant: Variant,
    pub iterates: Vec<Iterate>,
    pub converged: bool,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid_rebuilds: Vec<GridRebuild>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<crate::are::StepSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skips: Option<crate::are::SkipCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl FitReport {
    pub fn last(&self) -> Option<&Iterate> {
        self.iterates.last()
    }

    pub fn final_lambda(&self) -> Option<Lambda> {
        self.last().map(Iterate::lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AigOptions {
    pub variant: Variant,
    pub tol: f64,
    pub max_iter: usize,
    /// Rebuild the grid when the K estimate leaves the middle half of the span.
    pub rebuild_grid: bool,
}

impl Default for AigOptions {
    fn default() -> Self {
        AigOptions { variant: Variant::ExactCriticalPoint, tol: 1e-8, max_iter: 500, rebuild_grid: true }
    }
}

/// Runs the global iterative algorithm from `lambda0`.
///
/// Failures after the initial evaluation end the run with
/// [`StopReason::Error`] and keep the iterate history.
pub fn fit_aig(ys: &[f64], lambda0: &Lambda, hmm: &GridHmm, options: &AigOptions) -> Result<FitReport> {
    lambda0.validate()?;
    if ys.is_empty() {
        return Err(Error::Domain("no observations to fit".into()));
    }
    let mut hmm = hmm.clone();
    let mut lambda = *lambda0;
    let mut fb = hmm.posteriors(&lambda, ys, XiStorage::TotalOnly)?;
    let mut report = FitReport {
        variant: options.variant,
        iterates: vec![Iterate::new(0, &lambda, fb.loglik)],
        converged: false,
        stop_reason: StopReason::MaxIterations,
        error: None,
        grid_rebuilds: Vec::new(),
        schedule: None,
        skips: None,
        provenance: None,
    };
    for iter in 1..=options.max_iter {
        let step = (|| -> Result<(Lambda, FBResult, bool)> {
            let stats = accumulate_stats(ys, &hmm.grid, &fb, hmm.h)?;
            let next = reestimate(&stats, &lambda, options.variant)?;
            let (_, u_max) = hmm.grid.bounds();
            let rebuilt = options.rebuild_grid && !(0.25 * u_max..=0.75 * u_max).contains(&next.k);
            if rebuilt {
                hmm = hmm.rebuilt_around(next.k)?;
            }
            let fb = hmm.posteriors(&next, ys, XiStorage::TotalOnly)?;
            Ok((next, fb, rebuilt))
        })();
        match step {
            Ok((next, next_fb, rebuilt)) => {
                if rebuilt {
                    let (u_min, u_max) = hmm.grid.bounds();
                    info!(
                        "iteration {iter}: K = {:.6} left the middle of the grid; rebuilt to [{u_min}, {u_max:.6}]",
                        next.k
                    );
                    report.grid_rebuilds.push(GridRebuild { iter, u_max });
                }
                let delta = next_fb.loglik - fb.loglik;
                lambda = next;
                fb = next_fb;
                report.iterates.push(Iterate::new(iter, &lambda, fb.loglik));
                if !rebuilt && delta.abs() <= options.tol {
                    report.converged = true;
                    report.stop_reason = StopReason::Tolerance;
                    break;
                }
            }
            Err(e) => {
                report.stop_reason = StopReason::Error;
                report.error = Some(e.to_string());
                break;
            }
        }
    }
    Ok(report)
}
