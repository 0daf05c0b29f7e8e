//! Discrete logistic population dynamics with affine observation.
//!
//! The deterministic map is `u' = u + h r u (1 - u/K)` observed through
//! `y = a u + b`. The stochastic model adds independent Gaussian noise with
//! standard deviation `sigma` to the state and `tau` to the observation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Param, Result};

/// Lower bound on both noise standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const TAU_FLOOR: f64 = 1e-6;

/// Simulated states beyond this magnitude abort the run.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// The parameter vector `(r, K, a, b, sigma, tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambda {
    pub r: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub tau: f64,
}

impl Lambda {
    pub fn new(r: f64, k: f64, a: f64, b: f64, sigma: f64, tau: f64) -> Result<Self> {
        let lambda = Lambda { r, k, a, b, sigma, tau };
        lambda.validate()?;
        Ok(lambda)
    }

    pub fn validate(&self) -> Result<()> {
        for p in Param::ALL {
            if !self.get(p).is_finite() {
                return Err(Error::Domain(format!("parameter {p} is not finite")));
            }
        }
        if self.k <= 0.0 {
            return Err(Error::Domain(format!("K must be positive, got {}", self.k)));
        }
        if self.sigma < SIGMA_FLOOR {
            return Err(Error::Domain(format!("sigma must be at least {SIGMA_FLOOR:e}, got {}", self.sigma)));
        }
        if self.tau < TAU_FLOOR {
            return Err(Error::Domain(format!("tau must be at least {TAU_FLOOR:e}, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::R => self.r,
            Param::K => self.k,
            Param::A => self.a,
            Param::B => self.b,
            Param::Sigma => self.sigma,
            Param::Tau => self.tau,
        }
    }

    pub fn set(&mut self, p: Param, value: f64) {
        match p {
            Param::R => self.r = value,
            Param::K => self.k = value,
            Param::A => self.a = value,
            Param::B => self.b = value,
            Param::Sigma => self.sigma = value,
            Param::Tau => self.tau = value,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.r, self.k, self.a, self.b, self.sigma, self.tau]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Lambda { r: v[0], k: v[1], a: v[2], b: v[3], sigma: v[4], tau: v[5] }
    }

    /// Coordinates `(r, 1/K, a, b, sigma^2, tau^2)` in which the recursive
    /// estimator is affine.
    pub fn transformed(&self) -> [f64; 6] {
        [self.r, 1.0 / self.k, self.a, self.b, self.sigma * self.sigma, self.tau * self.tau]
    }

    /// Relative error `|self - truth| / |truth|` for one component.
    pub fn relative_error(&self, truth: &Lambda, p: Param) -> f64 {
        let t = truth.get(p);
        (self.get(p) - t).abs() / t.abs()
    }
}

/// Time step, horizon, initial population and seed of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub h: f64,
    /// Number of steps N.
    pub steps: usize,
    pub u0: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::Config(format!("h must be positive, got {}", self.h)));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.u0.is_finite() && self.u0 >= 0.0) {
            return Err(Error::Config(format!("u0 must be nonnegative, got {}", self.u0)));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// States `u_0..u_N` and observations `y_1..y_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub observations: Vec<f64>,
    /// Number of steps where the state was clamped at zero.
    pub clamp_events: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} is not finite")))
    }
}

/// One Euler step of the logistic law: `u + h r u (1 - u/K)`.
pub fn logistic_step(u: f64, r: f64, k: f64, h: f64) -> Result<f64> {
    check_finite("u", u)?;
    check_finite("r", r)?;
    check_finite("K", k)?;
    check_finite("h", h)?;
    if k <= 0.0 || h <= 0.0 {
        return Err(Error::Domain(format!("logistic step needs K > 0 and h > 0, got K={k}, h={h}")));
    }
    Ok(logistic_mean(u, r, 1.0 / k, h))
}

/// Unchecked drift in terms of `1/K`, used by the inner loops.
#[inline]
pub(crate) fn logistic_mean(u: f64, r: f64, inv_k: f64, h: f64) -> f64 {
    u + h * r * u * (1.0 - inv_k * u)
}

pub fn observe(u: f64, a: f64, b: f64) -> Result<f64> {
    check_finite("u", u)?;
    check_finite("a", a)?;
    check_finite("b", b)?;
    Ok(a * u + b)
}

/// Closed-form solution of `du/dt = r u (1 - u/K)`.
pub fn logistic_exact(u0: f64, r: f64, k: f64, t: f64) -> f64 {
    let g = (r * t).exp();
    k * u0 * g / (k + u0 * (g - 1.0))
}

/// Simulates the stochastic model, drawing `v_n` then `w_n` at each step.
///
/// Negative states are clamped at zero and counted in
/// [`Trajectory::clamp_events`].
pub fn simulate<R: Rng + ?Sized>(lambda: &Lambda, config: &SimConfig, rng: &mut R) -> Result<Trajectory> {
    lambda.validate()?;
    run(lambda, config, |(sigma, tau)| {
        let v: f64 = rng.sample(StandardNormal);
        let w: f64 = rng.sample(StandardNormal);
        (sigma * v, tau * w)
    })
}

/// Noise-free run of the same recursion.
pub fn simulate_deterministic(lambda: &Lambda, config: &SimConfig) -> Result<Trajectory> {
    lambda.validate()?;
    run(lambda, config, |_| (0.0, 0.0))
}

fn run<F>(lambda: &Lambda, config: &SimConfig, mut noise: F) -> Result<Trajectory>
where
    F: FnMut((f64, f64)) -> (f64, f64),
{
    config.validate()?;
    let n = config.steps;
    let mut states = Vec::with_capacity(n + 1);
    let mut observations = Vec::with_capacity(n);
    let mut clamp_events = 0;
    let mut u = config.u0;
    states.push(u);
    for step in 1..=n {
        let (v, w) = noise((lambda.sigma, lambda.tau));
        u = logistic_step(u, lambda.r, lambda.k, config.h)? + v;
        if !u.is_finite() || u.abs() > DIVERGENCE_BOUND {
            return Err(Error::SimulationDiverged { step, value: u });
        }
        if u < 0.0 {
            u = 0.0;
            clamp_events += 1;
        }
        states.push(u);
        observations.push(observe(u, lambda.a, lambda.b)? + w);
    }
    Ok(Trajectory { states, observations, clamp_events })
}
