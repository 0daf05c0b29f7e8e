//! Finite quantization of the population state.
//!
//! A uniform grid of cell centers turns the stochastic logistic model into a
//! finite hidden Markov model: transition weights come from the Gaussian
//! state-noise density evaluated between centers, emission weights from the
//! Gaussian observation density.
//!
//! Cell indices are zero-based throughout.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logistic_mean, Lambda};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian log-density of `x` with the given mean and standard deviation.
#[inline]
pub fn gaussian_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

#[inline]
pub fn gaussian_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    points: Vec<f64>,
    cell_width: f64,
    u_min: f64,
    u_max: f64,
}

/// Uniform grid of `m` cells over `[u_min, u_max]` with centers at
/// `u_min + (i + 1/2) du`.
pub fn build_grid(u_min: f64, u_max: f64, m: usize) -> Result<StateGrid> {
    if !(u_min.is_finite() && u_max.is_finite()) {
        return Err(Error::Config("grid bounds must be finite".into()));
    }
    if u_min < 0.0 || u_min >= u_max {
        return Err(Error::Config(format!("grid needs 0 <= u_min < u_max, got [{u_min}, {u_max}]")));
    }
    if m < 2 {
        return Err(Error::Config(format!("grid needs at least 2 cells, got {m}")));
    }
    Ok(StateGrid::uniform(u_min, u_max, m))
}

impl StateGrid {
    fn uniform(u_min: f64, u_max: f64, m: usize) -> Self {
        let du = (u_max - u_min) / m as f64;
        let points = (0..m).map(|i| u_min + (i as f64 + 0.5) * du).collect();
        StateGrid { points, cell_width: du, u_min, u_max }
    }

    /// Degenerate one-cell grid centered in `[u_min, u_max]`.
    pub fn single_cell(u_min: f64, u_max: f64) -> Result<Self> {
        if !(u_min.is_finite() && u_max.is_finite()) || u_min < 0.0 || u_min >= u_max {
            return Err(Error::Config(format!("bad single-cell bounds [{u_min}, {u_max}]")));
        }
        Ok(StateGrid::uniform(u_min, u_max, 1))
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_width(&self) -> f64 {
        self.cell_width
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.u_min, self.u_max)
    }

    /// Index of the cell containing `u`; out-of-range values clip to the
    /// first or last cell. The upper bound belongs to the last cell.
    pub fn quantize(&self, u: f64) -> usize {
        let last = self.points.len() - 1;
        if u.is_nan() {
            return 0;
        }
        let pos = ((u - self.u_min) / self.cell_width).floor();
        if pos <= 0.0 {
            0
        } else if pos >= last as f64 {
            last
        } else {
            pos as usize
        }
    }
}

/// How the initial state distribution is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    /// All mass on the cell containing the given state.
    Delta(f64),
    Named(PriorKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Uniform,
}

impl PriorSpec {
    pub const UNIFORM: PriorSpec = PriorSpec::Named(PriorKind::Uniform);
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::UNIFORM
    }
}

/// Probability vector over grid cells for the first hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialPrior {
    pub weights: Vec<f64>,
}

pub fn initial_prior(grid: &StateGrid, spec: PriorSpec) -> Result<InitialPrior> {
    let m = grid.len();
    let weights = match spec {
        PriorSpec::Named(PriorKind::Uniform) => vec![1.0 / m as f64; m],
        PriorSpec::Delta(u0) => {
            if !u0.is_finite() {
                return Err(Error::Domain("delta prior location is not finite".into()));
            }
            let mut w = vec![0.0; m];
            w[grid.quantize(u0)] = 1.0;
            w
        }
    };
    Ok(InitialPrior { weights })
}

impl InitialPrior {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Domain("prior weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("prior weights sum to {total}, not 1")));
        }
        Ok(InitialPrior { weights })
    }
}

/// How state-noise densities become transition weights.
///
/// `Density` keeps the midpoint-rule weights, so the path sum is a quadrature
/// of the continuous-state likelihood and the Gaussian auxiliary function is
/// exactly its EM bound. Renormalized rows perturb every weight by a factor
/// that depends on the parameters, which the closed-form M-step ignores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionNorm {
    /// `density * du`, each row renormalized to sum to one.
    Rows,
    /// `density * du` as is; rows lose the mass falling outside the grid.
    #[default]
    Density,
}

/// `M x M` matrix of transition weights between grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub matrix: Array2<f64>,
    pub norm: TransitionNorm,
}

impl TransitionModel {
    /// Wraps an arbitrary nonnegative matrix (used by tests and oracles).
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::Domain("transition matrix must be square and nonempty".into()));
        }
        if matrix.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("transition weights must be finite and nonnegative".into()));
        }
        Ok(TransitionModel { matrix, norm: TransitionNorm::Density })
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }
}

/// Row-stochastic transition matrix of the quantized state equation.
pub fn transition_matrix(lambda: &Lambda, grid: &StateGrid, h: f64) -> Result<TransitionModel> {
    transition_kernel(lambda, grid, h, TransitionNorm::Rows)
}

pub fn transition_kernel(lambda: &Lambda, grid: &StateGrid, h: f64, norm: TransitionNorm) -> Result<TransitionModel> {
    lambda.validate()?;
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {h}")));
    }
    let m = grid.len();
    let pts = grid.points();
    let du = grid.cell_width();
    let inv_k = 1.0 / lambda.k;
    let mut matrix = Array2::zeros((m, m));
    if m == 1 {
        matrix[[0, 0]] = match norm {
            TransitionNorm::Rows => 1.0,
            TransitionNorm::Density => {
                gaussian_pdf(pts[0], logistic_mean(pts[0], lambda.r, inv_k, h), lambda.sigma) * du
            }
        };
        return Ok(TransitionModel { matrix, norm });
    }
    for (i, &from) in pts.iter().enumerate() {
        let mean = logistic_mean(from, lambda.r, inv_k, h);
        let mut row = matrix.row_mut(i);
        let mut total = 0.0;
        for (cell, &to) in row.iter_mut().zip(pts) {
            *cell = gaussian_pdf(to, mean, lambda.sigma) * du;
            total += *cell;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::GridCoverage { cell: i });
        }
        if norm == TransitionNorm::Rows {
            row.mapv_inplace(|v| v / total);
        }
    }
    Ok(TransitionModel { matrix, norm })
}

/// Observation density of `y` at every cell center (no `du` factor).
pub fn emission_weights(lambda: &Lambda, grid: &StateGrid, y: f64) -> Result<Vec<f64>> {
    lambda.validate()?;
    emission_row(lambda, grid, y, 0)
}

fn emission_row(lambda: &Lambda, grid: &StateGrid, y: f64, step: usize) -> Result<Vec<f64>> {
    let e: Vec<f64> = grid.points().iter().map(|&m| gaussian_pdf(y, lambda.a * m + lambda.b, lambda.tau)).collect();
    if e.iter().all(|&v| v == 0.0) {
        return Err(Error::EmissionUnderflow { step });
    }
    Ok(e)
}

/// Emission weights for a whole observation block, stored per step as
/// `weights[n] * exp(log_offsets[n])`.
///
/// Building from log-densities and factoring out each row's maximum keeps
/// observations far from every cell representable; downstream posteriors
/// are unaffected and the offsets are added back into the log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct Emissions {
    pub weights: Array2<f64>,
    pub log_offsets: Vec<f64>,
}

impl Emissions {
    /// Plain weights, no offsets. Rows that are entirely zero are rejected.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("emission weights must be finite and nonnegative".into()));
        }
        for (n, row) in weights.rows().into_iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::EmissionUnderflow { step: n + 1 });
            }
        }
        let n = weights.nrows();
        Ok(Emissions { weights, log_offsets: vec![0.0; n] })
    }

    pub fn from_log_weights(log_weights: Array2<f64>) -> Result<Self> {
        let n = log_weights.nrows();
        let mut weights = Array2::zeros(log_weights.raw_dim());
        let mut log_offsets = Vec::with_capacity(n);
        for (step, (src, mut dst)) in log_weights.rows().into_iter().zip(weights.rows_mut()).enumerate() {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::EmissionUnderflow { step: step + 1 });
            }
            dst.zip_mut_with(&src, |d, &s| *d = (s - max).exp());
            log_offsets.push(max);
        }
        Ok(Emissions { weights, log_offsets })
    }

    /// Emission weights of every observation under `lambda`.
    pub fn from_observations(lambda: &Lambda, grid: &StateGrid, ys: &[f64]) -> Result<Self> {
        lambda.validate()?;
        let pts = grid.points();
        let mut logw = Array2::zeros((ys.len(), pts.len()));
        for (n, &y) in ys.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::Domain(format!("observation {} is not finite", n + 1)));
            }
            for (i, &m) in pts.iter().enumerate() {
                logw[[n, i]] = gaussian_ln_pdf(y, lambda.a * m + lambda.b, lambda.tau);
            }
        }
        Emissions::from_log_weights(logw)
    }

    pub fn steps(&self) -> usize {
        self.weights.nrows()
    }

    pub fn states(&self) -> usize {
        self.weights.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lambda() -> Lambda {
        Lambda::new(0.8, 100.0, 2.0, 5.0, 1.0, 0.5).unwrap()
    }

    #[test]
    fn build_grid_examples() {
        let g = build_grid(0.0, 10.0, 2).unwrap();
        assert_eq!(g.points(), &[2.5, 7.5]);
        assert_eq!(g.cell_width(), 5.0);

        let g = build_grid(0.0, 100.0, 100).unwrap();
        assert_eq!(g.cell_width(), 1.0);
        assert_eq!(g.points()[0], 0.5);
        assert_eq!(g.points()[99], 99.5);

        let g = build_grid(0.0, 200.0, 64).unwrap();
        for (i, &m) in g.points().iter().enumerate() {
            assert_eq!(g.quantize(m), i);
        }
    }

    #[test]
    fn build_grid_rejects_bad_config() {
        assert!(matches!(build_grid(0.0, 10.0, 1), Err(Error::Config(_))));
        assert!(matches!(build_grid(-1.0, 10.0, 4), Err(Error::Config(_))));
        assert!(matches!(build_grid(5.0, 5.0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn grid_spacing_is_uniform() {
        let g = build_grid(3.0, 517.0, 97).unwrap();
        for w in g.points().windows(2) {
            assert!(((w[1] - w[0]) / g.cell_width() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn quantize_examples() {
        let g = build_grid(0.0, 10.0, 2).unwrap();
        assert_eq!(g.quantize(1.0), 0);
        assert_eq!(g.quantize(-3.0), 0);
        assert_eq!(g.quantize(10.0), 1);
        assert_eq!(g.quantize(5.0), 1);
        assert_eq!(g.quantize(1e9), 1);
    }

    #[test]
    fn single_cell_transition_is_one() {
        let g = StateGrid::single_cell(0.0, 10.0).unwrap();
        let t = transition_matrix(&lambda(), &g, 0.1).unwrap();
        assert_eq!(t.matrix[[0, 0]], 1.0);
    }

    #[test]
    fn rows_are_stochastic() {
        let g = build_grid(0.0, 200.0, 64).unwrap();
        let t = transition_matrix(&lambda(), &g, 0.05).unwrap();
        for row in t.matrix.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn wide_noise_gives_uniform_rows() {
        let g = build_grid(0.0, 10.0, 8).unwrap();
        let l = Lambda { sigma: 100.0 * 10.0, ..lambda() };
        let t = transition_matrix(&l, &g, 0.1).unwrap();
        for v in t.matrix.iter() {
            assert!((v - 1.0 / 8.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn argmax_follows_the_deterministic_step() {
        let g = build_grid(0.0, 200.0, 64).unwrap();
        let l = lambda();
        let t = transition_matrix(&l, &g, 0.05).unwrap();
        for (i, &m) in g.points().iter().enumerate() {
            let target = g.quantize(crate::model::logistic_step(m, l.r, l.k, 0.05).unwrap());
            if target == 0 || target == g.len() - 1 {
                continue;
            }
            let row = t.matrix.row(i);
            let argmax = (0..g.len()).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
            assert_eq!(argmax, target, "row {i}");
        }
    }

    #[test]
    fn uncovered_row_is_reported() {
        let g = build_grid(0.0, 10.0, 4).unwrap();
        // Centers far below the mean of every row by hundreds of sigma.
        let l = Lambda { r: -1000.0, sigma: 1e-3, ..lambda() };
        match transition_matrix(&l, &g, 1.0) {
            Err(Error::GridCoverage { cell }) => assert!(cell < 4),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn emission_examples() {
        let g = build_grid(0.0, 100.0, 4).unwrap();
        let l = Lambda { tau: 0.5, ..lambda() };
        let m1 = g.points()[1];
        let e = emission_weights(&l, &g, 2.0 * m1 + 5.0).unwrap();
        let peak = 1.0 / (0.5 * (2.0 * PI).sqrt());
        assert!((e[1] - peak).abs() < 1e-15);
        let argmax = (0..4).max_by(|&x, &y| e[x].total_cmp(&e[y])).unwrap();
        assert_eq!(argmax, 1);

        let flat = Lambda { a: 0.0, ..l };
        let e = emission_weights(&flat, &g, 17.0).unwrap();
        assert!(e.iter().all(|&v| v == e[0]));
    }

    #[test]
    fn emission_underflow_is_an_error() {
        let g = build_grid(0.0, 10.0, 4).unwrap();
        let l = Lambda { tau: 1e-3, ..lambda() };
        assert!(matches!(emission_weights(&l, &g, 1e6), Err(Error::EmissionUnderflow { .. })));
        // The log-domain path keeps the same observation usable.
        let e = Emissions::from_observations(&l, &g, &[1e6]).unwrap();
        assert_eq!(e.weights.row(0).iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn prior_examples() {
        let g = build_grid(0.0, 8.0, 4).unwrap();
        assert_eq!(initial_prior(&g, PriorSpec::UNIFORM).unwrap().weights, vec![0.25; 4]);
        let g = build_grid(0.0, 10.0, 2).unwrap();
        assert_eq!(initial_prior(&g, PriorSpec::Delta(1.0)).unwrap().weights, vec![1.0, 0.0]);
        assert_eq!(initial_prior(&g, PriorSpec::Delta(9.0)).unwrap().weights, vec![0.0, 1.0]);
    }

    #[test]
    fn prior_spec_parses_from_toml_values() {
        #[derive(Deserialize)]
        struct W {
            prior: PriorSpec,
        }
        let w: W = toml::from_str("prior = \"uniform\"").unwrap();
        assert_eq!(w.prior, PriorSpec::UNIFORM);
        let w: W = toml::from_str("prior = 5.0").unwrap();
        assert_eq!(w.prior, PriorSpec::Delta(5.0));
    }
}
