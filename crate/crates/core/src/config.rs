//! Run configuration, read from a single TOML file.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! initial = { r = 0.6, K = 120.0, a = 1.8, b = 4.0, sigma = 1.2, tau = 0.6 }
//! truth = { r = 0.8, K = 100.0, a = 2.0, b = 5.0, sigma = 1.0, tau = 0.5 }
//!
//! [sim]
//! h = 0.05
//! steps = 2000
//! u0 = 5.0
//!
//! [grid]
//! M = 64
//! prior = 5.0
//!
//! [aig]
//! variant = "exact-critical-point"
//!
//! [are]
//! schedule = { kind = "bertrand", k = 1.0 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aig::AigOptions;
use crate::are::AreOptions;
use crate::error::{Error, Result};
use crate::hmm::{GridHmm, GridSpec};
use crate::model::{Lambda, SimConfig};
use crate::oracle::OracleBudget;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    pub sim: SimSection,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub aig: AigOptions,
    #[serde(default)]
    pub are: AreOptions,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Starting point of the estimators.
    pub initial: Lambda,
    /// Parameters that generate synthetic data.
    #[serde(default)]
    pub truth: Option<Lambda>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub h: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_u0")]
    pub u0: f64,
}

fn default_steps() -> usize {
    2000
}

fn default_u0() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also write smoothed state posteriors from `verify` when data is given.
    pub gamma: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("."), gamma: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub budget: OracleBudget,
    /// Random small instances for the path-sum comparison.
    pub instances: usize,
    /// Synthetic datasets for the gradient and least-squares checks.
    pub datasets: usize,
    pub steps: usize,
    pub cells: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Length of the injected-statistics stream.
    pub average_steps: usize,
    pub tolerances: Tolerances,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            budget: OracleBudget::default(),
            instances: 100,
            datasets: 20,
            steps: 200,
            cells: 32,
            fd_step: 1e-5,
            average_steps: 100_000,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub path_sum: f64,
    pub gradient: f64,
    pub least_squares: f64,
    pub running_average: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { path_sum: 1e-10, gradient: 1e-4, least_squares: 1e-9, running_average: 1e-12 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.initial.validate()?;
        if let Some(truth) = &self.model.truth {
            truth.validate()?;
        }
        self.sim_config().validate()?;
        if self.grid.cells < 1 {
            return Err(Error::Config("grid.M must be at least 1".into()));
        }
        self.are.schedule.validate()?;
        if self.are.stride == 0 {
            return Err(Error::Config("are.stride must be at least 1".into()));
        }
        if !(self.aig.tol >= 0.0) {
            return Err(Error::Config(format!("aig.tol must be nonnegative, got {}", self.aig.tol)));
        }
        let t = &self.verify.tolerances;
        for (name, v) in [
            ("path_sum", t.path_sum),
            ("gradient", t.gradient),
            ("least_squares", t.least_squares),
            ("running_average", t.running_average),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("verify.tolerances.{name} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig { h: self.sim.h, steps: self.sim.steps, u0: self.sim.u0, seed: self.seed }
    }

    pub fn truth(&self) -> Result<Lambda> {
        self.model.truth.ok_or_else(|| Error::Config("model.truth is required to simulate".into()))
    }

    /// Grid HMM spanning `[u_min, u_max]`, with `u_max` defaulting to twice
    /// the initial carrying capacity.
    pub fn hmm(&self) -> Result<GridHmm> {
        GridHmm::from_spec(&self.grid, self.model.initial.k, self.sim.h)
    }
}
