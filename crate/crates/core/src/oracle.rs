//! Independent validators for the forward-backward and re-estimation code.
//!
//! Nothing here calls into the recursions or solvers it checks: likelihoods
//! are literal sums over every grid path, the auxiliary function is
//! re-evaluated from the full pairwise posteriors with its own density
//! formula, and the closed-form M-step uses centered moments and a QR
//! factorization instead of normal equations.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::aig::{Floors, SufficientStats};
use crate::error::{Error, Param, Result};
use crate::fb::XiStorage;
use crate::grid::emission_weights;
use crate::hmm::GridHmm;
use crate::model::Lambda;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBudget {
    pub max_paths: u64,
    pub max_n: usize,
    pub max_m: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget { max_paths: 1_000_000, max_n: 6, max_m: 4 }
    }
}

impl OracleBudget {
    pub fn check(&self, n: usize, m: usize) -> Result<()> {
        let required = (m as f64).powi(n as i32);
        if n > self.max_n || m > self.max_m || required > self.max_paths as f64 {
            return Err(Error::BudgetExceeded {
                required,
                n,
                m,
                max_paths: self.max_paths,
                max_n: self.max_n,
                max_m: self.max_m,
            });
        }
        Ok(())
    }
}

/// Exhaustive-enumeration posteriors. `xi[k]` pairs steps `k` and `k + 1`.
#[derive(Debug, Clone)]
pub struct BruteForce {
    pub loglik: f64,
    pub gamma: Array2<f64>,
    pub xi: Array3<f64>,
}

/// Sums `π(u_1) e_1(u_1) Π t(u_{n-1}, u_n) e_n(u_n)` over all `M^N` paths.
pub fn brute_force_hmm(t: &Array2<f64>, e: &Array2<f64>, prior: &[f64], budget: &OracleBudget) -> Result<BruteForce> {
    let (n, m) = e.dim();
    budget.check(n, m)?;
    enumerate_paths(t, e, prior)
}

fn enumerate_paths(t: &Array2<f64>, e: &Array2<f64>, prior: &[f64]) -> Result<BruteForce> {
    let (n, m) = e.dim();
    if n == 0 || t.dim() != (m, m) || prior.len() != m {
        return Err(Error::Domain("brute force: inconsistent dimensions".into()));
    }
    let mut gamma = Array2::<f64>::zeros((n, m));
    let mut xi = Array3::<f64>::zeros((n.saturating_sub(1), m, m));
    let mut total = 0.0;
    let mut path = vec![0usize; n];
    loop {
        let mut w = prior[path[0]] * e[[0, path[0]]];
        for k in 1..n {
            w *= t[[path[k - 1], path[k]]] * e[[k, path[k]]];
        }
        total += w;
        for k in 0..n {
            gamma[[k, path[k]]] += w;
            if k > 0 {
                xi[[k - 1, path[k - 1], path[k]]] += w;
            }
        }
        // Odometer increment over {0..m}^n.
        let mut pos = n;
        loop {
            if pos == 0 {
                let loglik = total.ln();
                gamma.mapv_inplace(|v| v / total);
                xi.mapv_inplace(|v| v / total);
                return Ok(BruteForce { loglik, gamma, xi });
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < m {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Path-sum likelihood of observations under `lambda` on the HMM's grid,
/// using the same transition and emission conventions as the fitters.
///
/// Paths start at the unobserved initial state, which carries the prior, so
/// `M^(N+1)` paths are summed. `gamma` covers the `N` observed states and
/// `xi[0]` is the pair `(u_0, u_1)`.
pub fn brute_force_likelihood(lambda: &Lambda, hmm: &GridHmm, ys: &[f64], budget: &OracleBudget) -> Result<BruteForce> {
    budget.check(ys.len(), hmm.grid.len())?;
    let t = hmm.transitions(lambda)?;
    let m = hmm.grid.len();
    let mut e = Array2::ones((ys.len() + 1, m));
    for (n, &y) in ys.iter().enumerate() {
        let row = emission_weights(lambda, &hmm.grid, y).map_err(|err| match err {
            Error::EmissionUnderflow { .. } => Error::EmissionUnderflow { step: n + 1 },
            other => other,
        })?;
        e.row_mut(n + 1).assign(&ndarray::Array1::from(row));
    }
    let full = enumerate_paths(&t.matrix, &e, &hmm.prior.weights)?;
    Ok(BruteForce { loglik: full.loglik, gamma: full.gamma.slice(s![1.., ..]).to_owned(), xi: full.xi })
}

/// Central-difference gradient of the normalized auxiliary function in the
/// coordinates `(r, 1/K, a, b, sigma, tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub values: [f64; 6],
    /// Magnitude of each coordinate at the evaluation point.
    pub scale: [f64; 6],
    /// Number of observations the auxiliary function sums over.
    pub n_obs: usize,
}

impl FdGradient {
    /// `|∂Q/∂θ| · |θ| / N` per coordinate: the change in per-observation Q
    /// under a unit relative change of the parameter.
    pub fn relative(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.values[i].abs() * self.scale[i] / self.n_obs as f64)
    }

    pub fn max_relative(&self, params: &[Param]) -> f64 {
        let rel = self.relative();
        params.iter().map(|p| rel[p.index()]).fold(0.0, f64::max)
    }

    pub fn non_finite(&self) -> Vec<Param> {
        Param::ALL.into_iter().filter(|p| !self.values[p.index()].is_finite()).collect()
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn to_coords(l: &Lambda) -> [f64; 6] {
    [l.r, 1.0 / l.k, l.a, l.b, l.sigma, l.tau]
}

#[allow(clippy::too_many_arguments)]
fn q_from_full_posteriors(
    c: &[f64; 6],
    ys: &[f64],
    points: &[f64],
    prior: &[f64],
    h: f64,
    gamma: &Array2<f64>,
    initial: &Array2<f64>,
    xi: &[Array2<f64>],
) -> f64 {
    let [r, inv_k, a, b, sigma, tau] = *c;
    let mut q = 0.0;
    for (i, &pi) in prior.iter().enumerate() {
        let w: f64 = initial.row(i).sum();
        if w > 0.0 {
            q += w * pi.ln();
        }
    }
    for (n, &y) in ys.iter().enumerate() {
        for (i, &m) in points.iter().enumerate() {
            let g = gamma[[n, i]];
            if g > 0.0 {
                let res = y - a * m - b;
                q += g * (-tau.ln() - 0.5 * LN_2PI - res * res / (2.0 * tau * tau));
            }
        }
    }
    for slice in std::iter::once(initial).chain(xi) {
        for ((i, j), &w) in slice.indexed_iter() {
            if w > 0.0 {
                let x = points[i];
                let res = points[j] - x - h * r * x * (1.0 - inv_k * x);
                q += w * (-sigma.ln() - 0.5 * LN_2PI - res * res / (2.0 * sigma * sigma));
            }
        }
    }
    q
}

/// Central differences with step `delta * |θ|` of the auxiliary function
/// whose posteriors are computed under `lambda`, evaluated at `lambda_prime`.
pub fn fd_grad_q(lambda: &Lambda, lambda_prime: &Lambda, ys: &[f64], hmm: &GridHmm, delta: f64) -> Result<FdGradient> {
    if !(delta > 1e-8 && delta < 1e-3) {
        return Err(Error::Domain(format!("finite-difference step must lie in (1e-8, 1e-3), got {delta}")));
    }
    let fb = hmm.posteriors(lambda, ys, XiStorage::Full)?;
    let base = to_coords(lambda_prime);
    let points = hmm.grid.points();
    let initial = fb.initial_pair.as_ref().ok_or_else(|| Error::Domain("missing initial pair posterior".into()))?;
    let q = |c: &[f64; 6]| q_from_full_posteriors(c, ys, points, &hmm.prior.weights, hmm.h, &fb.gamma, initial, &fb.xi);
    let mut values = [0.0; 6];
    let mut scale = [0.0; 6];
    for i in 0..6 {
        let s = base[i].abs().max(1e-12);
        let step = delta * s;
        let mut plus = base;
        let mut minus = base;
        plus[i] += step;
        minus[i] -= step;
        values[i] = (q(&plus) - q(&minus)) / (2.0 * step);
        scale[i] = s;
    }
    Ok(FdGradient { values, scale, n_obs: ys.len() })
}

/// Applies a Givens rotation pass to fold one weighted row `[z0, z1 | t]`
/// into the upper-triangular factor `r` and the rotated right-hand side.
fn givens_update(r: &mut [[f64; 3]; 2], row: [f64; 3]) -> f64 {
    let mut row = row;
    for k in 0..2 {
        let (a, b) = (r[k][k], row[k]);
        if b == 0.0 {
            continue;
        }
        let rho = a.hypot(b);
        let (c, s) = (a / rho, b / rho);
        for col in k..3 {
            let (u, v) = (r[k][col], row[col]);
            r[k][col] = c * u + s * v;
            row[col] = -s * u + c * v;
        }
    }
    row[2] * row[2]
}

/// Closed-form weighted least-squares M-step, computed independently of
/// the main re-estimation path.
pub fn wls_mstep(stats: &SufficientStats) -> Result<Lambda> {
    let floors = Floors::for_cell_width(stats.cell_width);
    let pts = &stats.points;

    // Affine regression through centered moments.
    let w_total: f64 = stats.cell_weight.iter().sum();
    if !(w_total > 0.0) {
        return Err(Error::Unidentifiable { param: Param::B, reason: "no posterior mass".into() });
    }
    let m_bar = pts.iter().zip(&stats.cell_weight).map(|(m, w)| m * w).sum::<f64>() / w_total;
    let y_bar = stats.cell_mean_y.iter().zip(&stats.cell_weight).map(|(y, w)| y * w).sum::<f64>() / w_total;
    let mut var_m = 0.0;
    let mut cov = 0.0;
    for ((&m, &w), &y) in pts.iter().zip(&stats.cell_weight).zip(&stats.cell_mean_y) {
        var_m += w * (m - m_bar) * (m - m_bar);
        cov += w * (m - m_bar) * (y - y_bar);
    }
    let second = pts.iter().zip(&stats.cell_weight).map(|(m, w)| w * m * m).sum::<f64>();
    if !(var_m > second * 1e-12) {
        return Err(Error::Unidentifiable { param: Param::A, reason: "regressor has no spread".into() });
    }
    let a = cov / var_m;
    let b = y_bar - a * m_bar;
    let mut obs_ss = 0.0;
    for (i, &m) in pts.iter().enumerate() {
        let e = stats.cell_mean_y[i] - a * m - b;
        obs_ss += stats.cell_scatter_y[i] + stats.cell_weight[i] * e * e;
    }
    let tau = (obs_ss / w_total).sqrt().max(floors.tau);

    // State regression d = θ1 x - θ2 x² by Givens QR on columns scaled to
    // unit magnitude.
    let x_scale = pts.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut r = [[0.0; 3]; 2];
    let mut rss = 0.0;
    let mut pair_total = 0.0;
    for ((i, j), &w) in stats.pair.indexed_iter() {
        if w <= 0.0 {
            continue;
        }
        pair_total += w;
        let x = pts[i];
        let d = pts[j] - x;
        let sw = w.sqrt();
        let u = x / x_scale;
        rss += givens_update(&mut r, [sw * u, -sw * u * u, sw * d]);
    }
    if !(pair_total > 0.0) {
        return Err(Error::Unidentifiable { param: Param::R, reason: "no pairwise posterior mass".into() });
    }
    let diag_max = r[0][0].abs().max(r[1][1].abs());
    if r[0][0].abs() <= 1e-12 * diag_max.max(1e-300) || diag_max == 0.0 {
        return Err(Error::Unidentifiable { param: Param::R, reason: "state regressor vanishes".into() });
    }
    if r[1][1].abs() <= 1e-6 * r[0][0].abs() {
        return Err(Error::Unidentifiable { param: Param::K, reason: "state regressors are collinear".into() });
    }
    let c2 = r[1][2] / r[1][1];
    let c1 = (r[0][2] - r[0][1] * c2) / r[0][0];
    let theta1 = c1 / x_scale;
    let theta2 = c2 / (x_scale * x_scale);
    if !(theta2 > 0.0) {
        return Err(Error::CarryingCapacitySign { theta2 });
    }
    let rate = theta1 / stats.h;
    let k = theta1 / theta2;
    let sigma = if k < floors.k {
        // The clamped capacity moves off the least-squares solution; the
        // residual must then be recomputed.
        let k = floors.k;
        let mut ss = 0.0;
        for ((i, j), &w) in stats.pair.indexed_iter() {
            let x = pts[i];
            let e = pts[j] - x - stats.h * rate * x * (1.0 - x / k);
            ss += w * e * e;
        }
        (ss / pair_total).sqrt()
    } else {
        (rss / pair_total).sqrt()
    };
    Ok(Lambda { r: rate, k: k.max(floors.k), a, b, sigma: sigma.max(floors.sigma), tau })
}
