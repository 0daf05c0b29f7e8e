//! Scaled forward-backward recursions over the grid HMM.
//!
//! The first hidden state is drawn from the prior and emits `y_1`; each later
//! state follows the transition weights. `alpha[n]` is the filtered
//! distribution after `n + 1` observations and `scale[n] = 1 / c` where `c`
//! is the mass of the unnormalized forward vector at that step, so that
//! `loglik = -sum ln scale[n] + sum log_offsets[n]`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::grid::{Emissions, InitialPrior, TransitionModel};

#[derive(Debug, Clone)]
pub struct Forward {
    pub alphas: Array2<f64>,
    pub scale: Vec<f64>,
    pub loglik: f64,
}

/// Smoothed posteriors of one observation block.
///
/// `xi[k]` is the joint posterior of `(u_{k+1}, u_{k+2})` in one-based step
/// numbering, i.e. it pairs `gamma[k]` (rows) with `gamma[k + 1]` (columns).
/// `xi_total` is the sum of all slices (plus `initial_pair` when present),
/// which is all that the M-step needs.
///
/// `initial_pair` is the posterior of `(u_0, u_1)` when the prior describes
/// the state one step before the first observation; see
/// [`crate::hmm::GridHmm::posteriors`].
#[derive(Debug, Clone)]
pub struct FBResult {
    pub loglik: f64,
    pub gamma: Array2<f64>,
    pub xi: Vec<Array2<f64>>,
    pub xi_total: Array2<f64>,
    pub initial_pair: Option<Array2<f64>>,
    pub scale: Vec<f64>,
}

impl FBResult {
    pub fn steps(&self) -> usize {
        self.gamma.nrows()
    }
}

/// Whether [`posteriors_with`] keeps every pairwise slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XiStorage {
    Full,
    TotalOnly,
}

fn check_dims(t: &TransitionModel, e: &Emissions, prior: &InitialPrior) -> Result<()> {
    let m = t.len();
    if e.states() != m || prior.weights.len() != m {
        return Err(Error::Domain(format!(
            "dimension mismatch: transitions {m}, emissions {}, prior {}",
            e.states(),
            prior.weights.len()
        )));
    }
    if e.steps() == 0 {
        return Err(Error::Domain("empty observation block".into()));
    }
    Ok(())
}

pub fn forward(t: &TransitionModel, e: &Emissions, prior: &InitialPrior) -> Result<Forward> {
    check_dims(t, e, prior)?;
    let (n_steps, m) = (e.steps(), e.states());
    let mut alphas = Array2::zeros((n_steps, m));
    let mut scale = Vec::with_capacity(n_steps);
    let mut loglik = 0.0;
    let mut pred = Array1::from(prior.weights.clone());
    for n in 0..n_steps {
        let mut row = alphas.row_mut(n);
        row.assign(&(&pred * &e.weights.row(n)));
        let total = row.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Underflow { step: n + 1 });
        }
        row.mapv_inplace(|v| v / total);
        let c = 1.0 / total;
        scale.push(c);
        loglik += total.ln() + e.log_offsets[n];
        if n + 1 < n_steps {
            pred = row.dot(&t.matrix);
        }
    }
    Ok(Forward { alphas, scale, loglik })
}

pub fn backward(t: &TransitionModel, e: &Emissions, scale: &[f64]) -> Result<Array2<f64>> {
    let (n_steps, m) = (e.steps(), e.states());
    if scale.len() != n_steps || t.len() != m {
        return Err(Error::Domain("backward: scale or transition dimensions disagree".into()));
    }
    let mut betas = Array2::zeros((n_steps, m));
    betas.row_mut(n_steps - 1).fill(1.0);
    for n in (0..n_steps - 1).rev() {
        let weighted = &e.weights.row(n + 1) * &betas.row(n + 1);
        let next = t.matrix.dot(&weighted) * scale[n + 1];
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Underflow { step: n + 1 });
        }
        betas.row_mut(n).assign(&next);
    }
    Ok(betas)
}

pub fn posteriors(t: &TransitionModel, e: &Emissions, prior: &InitialPrior) -> Result<FBResult> {
    posteriors_with(t, e, prior, XiStorage::Full)
}

pub fn posteriors_with(
    t: &TransitionModel,
    e: &Emissions,
    prior: &InitialPrior,
    storage: XiStorage,
) -> Result<FBResult> {
    let fwd = forward(t, e, prior)?;
    let betas = backward(t, e, &fwd.scale)?;
    let (n_steps, m) = (e.steps(), e.states());

    let mut gamma = &fwd.alphas * &betas;
    for (n, mut row) in gamma.axis_iter_mut(Axis(0)).enumerate() {
        let total = row.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Underflow { step: n + 1 });
        }
        // Exact up to rounding; renormalize to absorb it.
        row.mapv_inplace(|v| v / total);
    }

    let mut xi = Vec::new();
    let mut xi_total = Array2::zeros((m, m));
    match storage {
        XiStorage::Full => {
            let mut slice = Array2::zeros((m, m));
            for n in 1..n_steps {
                pair_posterior(
                    fwd.alphas.row(n - 1),
                    &t.matrix,
                    (&e.weights.row(n) * &betas.row(n)).view(),
                    &mut slice,
                )
                .map_err(|_| Error::Underflow { step: n + 1 })?;
                xi_total += &slice;
                xi.push(slice.clone());
            }
        }
        XiStorage::TotalOnly if n_steps > 1 => {
            // Slice n is scale[n] * alpha[n-1] ⊗ (e[n] ∘ beta[n]) ∘ T, with unit
            // mass by construction, so the sum over n factors through one
            // matrix product.
            let mut left = fwd.alphas.slice(s![..n_steps - 1, ..]).to_owned();
            for (mut row, &c) in left.axis_iter_mut(Axis(0)).zip(&fwd.scale[1..]) {
                row *= c;
            }
            let right = &e.weights.slice(s![1.., ..]) * &betas.slice(s![1.., ..]);
            xi_total = left.t().dot(&right) * &t.matrix;
            if xi_total.iter().any(|v| !v.is_finite()) {
                return Err(Error::Underflow { step: n_steps });
            }
        }
        XiStorage::TotalOnly => {}
    }
    Ok(FBResult { loglik: fwd.loglik, gamma, xi, xi_total, initial_pair: None, scale: fwd.scale })
}

/// `out[i][j] ∝ left[i] * t[i][j] * right[j]`, normalized to unit mass.
pub(crate) fn pair_posterior(
    left: ArrayView1<f64>,
    t: &Array2<f64>,
    right: ArrayView1<f64>,
    out: &mut Array2<f64>,
) -> Result<(), ()> {
    let mut total = 0.0;
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = left[i] * t[[i, j]] * right[j];
        total += *v;
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(());
    }
    out.mapv_inplace(|v| v / total);
    Ok(())
}
