#![allow(dead_code)]

use ndarray::Array2;
use popid::fb::FBResult;
use popid::grid::{Emissions, InitialPrior, TransitionModel};
use popid::model::Lambda;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn synthetic_truth() -> Lambda {
    Lambda::new(0.8, 100.0, 2.0, 5.0, 1.0, 0.5).unwrap()
}

/// Raw HMM pieces with strictly positive entries.
pub struct RawHmm {
    pub t: TransitionModel,
    pub e: Emissions,
    pub prior: InitialPrior,
}

pub fn random_raw(seed: u64, n: usize, m: usize) -> RawHmm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Array2::from_shape_fn((m, m), |_| rng.random_range(0.01..1.0));
    for mut row in t.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    let e = Array2::from_shape_fn((n, m), |_| rng.random_range(1e-3..2.0));
    let mut prior: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= s);
    RawHmm {
        t: TransitionModel::from_matrix(t).unwrap(),
        e: Emissions::from_weights(e).unwrap(),
        prior: InitialPrior::from_weights(prior).unwrap(),
    }
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_slice_diff(a: &FBResult, b: &FBResult) -> f64 {
    let mut d = max_abs_diff(&a.gamma, &b.gamma);
    for (x, y) in a.xi.iter().zip(&b.xi) {
        d = d.max(max_abs_diff(x, y));
    }
    d
}
