//! A grid, its prior and the transition convention bundled together, so that
//! every component evaluates likelihoods of a parameter vector the same way.
//!
//! The prior describes the initial state `u_0`, one transition before the
//! first observation, so a block of `N` observations involves `N` transitions.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fb::{self, FBResult, XiStorage};
use crate::grid::{
    build_grid, initial_prior, transition_kernel, Emissions, InitialPrior, PriorSpec, StateGrid, TransitionModel,
    TransitionNorm,
};
use crate::model::Lambda;

/// Serializable description of a grid HMM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub u_min: f64,
    /// Defaults to twice the initial carrying-capacity guess.
    #[serde(default)]
    pub u_max: Option<f64>,
    #[serde(rename = "M", default = "default_cells")]
    pub cells: usize,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub transitions: TransitionNorm,
}

fn default_cells() -> usize {
    64
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            u_min: 0.0,
            u_max: None,
            cells: default_cells(),
            prior: PriorSpec::UNIFORM,
            transitions: TransitionNorm::Density,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridHmm {
    pub grid: StateGrid,
    pub prior: InitialPrior,
    pub prior_spec: PriorSpec,
    pub norm: TransitionNorm,
    pub h: f64,
}

impl GridHmm {
    pub fn new(grid: StateGrid, prior_spec: PriorSpec, norm: TransitionNorm, h: f64) -> Result<Self> {
        let prior = initial_prior(&grid, prior_spec)?;
        Ok(GridHmm { grid, prior, prior_spec, norm, h })
    }

    /// Builds the grid from a spec, filling `u_max = 2 K0` when unset.
    pub fn from_spec(spec: &GridSpec, k0: f64, h: f64) -> Result<Self> {
        let u_max = spec.u_max.unwrap_or(2.0 * k0);
        let grid = build_grid(spec.u_min, u_max, spec.cells)?;
        GridHmm::new(grid, spec.prior, spec.transitions, h)
    }

    /// Same HMM on a grid spanning `[u_min, 2 k]`.
    pub fn rebuilt_around(&self, k: f64) -> Result<Self> {
        let (u_min, _) = self.grid.bounds();
        let grid = build_grid(u_min, 2.0 * k, self.grid.len())?;
        GridHmm::new(grid, self.prior_spec, self.norm, self.h)
    }

    pub fn transitions(&self, lambda: &Lambda) -> Result<TransitionModel> {
        transition_kernel(lambda, &self.grid, self.h, self.norm)
    }

    pub fn emissions(&self, lambda: &Lambda, ys: &[f64]) -> Result<Emissions> {
        Emissions::from_observations(lambda, &self.grid, ys)
    }

    /// Distribution of the first observed state: the prior pushed through
    /// one transition.
    pub fn first_state_prior(&self, t: &TransitionModel) -> InitialPrior {
        let w = Array1::from(self.prior.weights.clone()).dot(&t.matrix);
        InitialPrior { weights: w.to_vec() }
    }

    /// Smoothed posteriors with the `(u_0, u_1)` pair attached and included in
    /// `xi_total`.
    pub fn posteriors(&self, lambda: &Lambda, ys: &[f64], storage: XiStorage) -> Result<FBResult> {
        let t = self.transitions(lambda)?;
        let e = self.emissions(lambda, ys)?;
        let first = self.first_state_prior(&t);
        let mut out = fb::posteriors_with(&t, &e, &first, storage)?;
        let m = self.grid.len();
        let mut pair = Array2::zeros((m, m));
        for ((i, j), v) in pair.indexed_iter_mut() {
            let p1 = first.weights[j];
            if p1 > 0.0 {
                *v = self.prior.weights[i] * t.matrix[[i, j]] / p1 * out.gamma[[0, j]];
            }
        }
        let total = pair.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Underflow { step: 1 });
        }
        pair.mapv_inplace(|v| v / total);
        out.xi_total += &pair;
        out.initial_pair = Some(pair);
        Ok(out)
    }

    pub fn loglik(&self, lambda: &Lambda, ys: &[f64]) -> Result<f64> {
        let t = self.transitions(lambda)?;
        let e = self.emissions(lambda, ys)?;
        Ok(fb::forward(&t, &e, &self.first_state_prior(&t))?.loglik)
    }
}
