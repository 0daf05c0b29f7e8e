use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the six estimated parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Param {
    #[serde(rename = "r")]
    R,
    #[serde(rename = "K")]
    K,
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "sigma")]
    Sigma,
    #[serde(rename = "tau")]
    Tau,
}

impl Param {
    pub const ALL: [Param; 6] = [Param::R, Param::K, Param::A, Param::B, Param::Sigma, Param::Tau];

    pub fn name(self) -> &'static str {
        match self {
            Param::R => "r",
            Param::K => "K",
            Param::A => "a",
            Param::B => "b",
            Param::Sigma => "sigma",
            Param::Tau => "tau",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation diverged at step {step}: |u| = {value:e} exceeds 1e12")]
    SimulationDiverged { step: usize, value: f64 },

    #[error(
        "grid coverage: transition row of cell {cell} has no mass inside the grid; widen the grid or increase sigma"
    )]
    GridCoverage { cell: usize },

    #[error("emission underflow at step {step}: every cell has zero observation density; widen tau or the grid")]
    EmissionUnderflow { step: usize },

    #[error("forward-backward underflow at step {step}: zero normalizer; widen tau or the grid")]
    Underflow { step: usize },

    #[error("parameter {param} is not identifiable: {reason}")]
    Unidentifiable { param: Param, reason: String },

    #[error("carrying capacity sign: quadratic state coefficient {theta2:e} is not positive")]
    CarryingCapacitySign { theta2: f64 },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("oracle budget exceeded: instance needs {required} paths (N={n}, M={m}), budget allows {max_paths} paths, N<={max_n}, M<={max_m}")]
    BudgetExceeded { required: f64, n: usize, m: usize, max_paths: u64, max_n: usize, max_m: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for failures of the estimation numerics, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SimulationDiverged { .. }
                | Error::GridCoverage { .. }
                | Error::EmissionUnderflow { .. }
                | Error::Underflow { .. }
                | Error::Unidentifiable { .. }
                | Error::CarryingCapacitySign { .. }
                | Error::NonFinite { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
