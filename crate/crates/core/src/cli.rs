//! Command-line front end: `simulate`, `fit-aig`, `fit-are` and `verify`.

use std::ffi::OsString;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::aig::{fit_aig, FitReport, StopReason};
use crate::are::OnlineEstimator;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fb::XiStorage;
use crate::hmm::GridHmm;
use crate::io::{load_observations, save_trajectory, write_gamma, ObservationReader};
use crate::model::simulate;
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "popid",
    version,
    about = "Grid-HMM parameter identification for a stochastic logistic population model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a trajectory from `model.truth`.
    Simulate(RunArgs),
    /// Offline EM fit of a whole observation file.
    FitAig(RunArgs),
    /// Online recursive fit; reads standard input when --data is absent or `-`.
    FitAre(RunArgs),
    /// Run the oracle conformance checks.
    Verify(RunArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a) | Command::FitAig(a) | Command::FitAre(a) | Command::Verify(a) => a,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::FitAig(_) => "fit-aig",
            Command::FitAre(_) => "fit-are",
            Command::Verify(_) => "verify",
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let args = cli.command.args();
    let config = RunConfig::load(&args.config)?;
    let out = args.out.clone().unwrap_or_else(|| config.output.dir.clone());
    std::fs::create_dir_all(&out)?;
    let ctx = Context { command: cli.command.name(), args, config: &config, out: &out };
    match &cli.command {
        Command::Simulate(_) => ctx.simulate(),
        Command::FitAig(_) => ctx.fit_aig(),
        Command::FitAre(_) => ctx.fit_are(),
        Command::Verify(_) => ctx.verify(),
    }
}

struct Context<'a> {
    command: &'static str,
    args: &'a RunArgs,
    config: &'a RunConfig,
    out: &'a Path,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

impl Context<'_> {
    fn provenance(&self, hmm: Option<&GridHmm>) -> serde_json::Value {
        let grid = hmm.map(|h| {
            let (u_min, u_max) = h.grid.bounds();
            json!({ "u_min": u_min, "u_max": u_max, "M": h.grid.len(), "prior": h.prior_spec, "transitions": h.norm })
        });
        json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_path": self.args.config,
            "data_path": self.args.data,
            "seed": self.config.seed,
            "grid": grid,
            "config": self.config,
        })
    }

    fn data_path(&self) -> Result<&Path> {
        self.args.data.as_deref().ok_or_else(|| Error::Config(format!("{} needs --data", self.command)))
    }

    fn simulate(&self) -> Result<i32> {
        let truth = self.config.truth()?;
        let sim = self.config.sim_config();
        let traj = simulate(&truth, &sim, &mut sim.rng())?;
        save_trajectory(&traj, &self.out.join("trajectory.csv"))?;
        let meta = json!({
            "truth": truth,
            "h": sim.h,
            "steps": sim.steps,
            "u0": sim.u0,
            "seed": sim.seed,
            "clamp_events": traj.clamp_events,
            "provenance": self.provenance(None),
        });
        write_json(&meta, &self.out.join("trajectory.json"))?;
        Ok(EXIT_OK)
    }

    fn finish_report(&self, mut report: FitReport, hmm: &GridHmm, file: &str) -> Result<i32> {
        report.provenance = Some(self.provenance(Some(hmm)));
        write_json(&report, &self.out.join(file))?;
        if let Some(err) = &report.error {
            eprintln!("error: {err}");
        }
        Ok(match report.stop_reason {
            StopReason::Tolerance | StopReason::EndOfStream => EXIT_OK,
            StopReason::MaxIterations => EXIT_NOT_CONVERGED,
            StopReason::Error => EXIT_NUMERICAL,
        })
    }

    fn fit_aig(&self) -> Result<i32> {
        let ys = load_observations(self.data_path()?)?;
        let hmm = self.config.hmm()?;
        let report = fit_aig(&ys, &self.config.model.initial, &hmm, &self.config.aig)?;
        self.finish_report(report, &hmm, "fit_aig.json")
    }

    fn fit_are(&self) -> Result<i32> {
        let hmm = self.config.hmm()?;
        let mut est = OnlineEstimator::new(&self.config.model.initial, &hmm, self.config.are)?;
        let input: Box<dyn std::io::Read> = match self.args.data.as_deref() {
            None => Box::new(std::io::stdin().lock()),
            Some(p) if p == Path::new("-") => Box::new(std::io::stdin().lock()),
            Some(p) => Box::new(BufReader::new(std::fs::File::open(p)?)),
        };
        let mut bad_input = None;
        let mut seen = 0usize;
        for item in ObservationReader::new(input)? {
            match item {
                Ok((_, y)) => {
                    seen += 1;
                    if est.push(y).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    bad_input = Some(e);
                    break;
                }
            }
        }
        if seen == 0 && bad_input.is_none() {
            return Err(Error::Config("observation stream is empty".into()));
        }
        let mut report = est.finish();
        if let Some(e) = bad_input {
            report.stop_reason = StopReason::Error;
            report.error = Some(e.to_string());
            self.finish_report(report, &hmm, "fit_are.json")?;
            return Ok(EXIT_VALIDATION);
        }
        self.finish_report(report, &hmm, "fit_are.json")
    }

    fn verify(&self) -> Result<i32> {
        let mut report = verify::run(self.config);
        let hmm = self.config.hmm()?;
        if let (Some(path), true) = (self.args.data.as_deref(), self.config.output.gamma) {
            let ys = load_observations(path)?;
            let fb = hmm.posteriors(&self.config.model.initial, &ys, XiStorage::TotalOnly)?;
            let file = std::fs::File::create(self.out.join("gamma.csv"))?;
            write_gamma(&fb.gamma, std::io::BufWriter::new(file))?;
        }
        report.provenance = Some(self.provenance(Some(&hmm)));
        write_json(&report, &self.out.join("verify.json"))?;
        for c in &report.checks {
            eprintln!(
                "{:?}: {} (ran {}, skipped {}, max error {:.3e})",
                c.status, c.name, c.ran, c.skipped, c.max_error
            );
        }
        Ok(if report.passed { EXIT_OK } else { EXIT_NUMERICAL })
    }
}
