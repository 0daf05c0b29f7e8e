//! Trajectory and observation files.
//!
//! Trajectories are CSV with header `n,u,y`: row 0 holds `u_0` and an empty
//! `y`, rows `1..N` hold `u_n, y_n`. Observation streams may omit the state
//! column (`n,y`).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::Trajectory;

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "u", "y"])?;
    for (n, &u) in traj.states.iter().enumerate() {
        let y = if n == 0 { String::new() } else { fmt(traj.observations[n - 1]) };
        w.write_record([n.to_string(), fmt(u), y])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trajectory(traj, std::io::BufWriter::new(file))
}

/// Column layout of an observation file, detected from its header.
#[derive(Debug, Clone, Copy)]
struct Columns {
    n: usize,
    y: usize,
}

fn columns(headers: &csv::StringRecord) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    match (find("n"), find("y")) {
        (Some(n), Some(y)) => Ok(Columns { n, y }),
        _ => Err(Error::Config(format!(
            "observation file needs `n` and `y` columns, found {:?}",
            headers.iter().collect::<Vec<_>>()
        ))),
    }
}

/// Incremental reader of `(n, y)` pairs; rows with an empty `y` (the `u_0`
/// row of a trajectory file) are skipped.
pub struct ObservationReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    cols: Columns,
    line: u64,
}

impl<R: Read> ObservationReader<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let cols = columns(reader.headers()?)?;
        Ok(ObservationReader { records: reader.into_records(), cols, line: 1 })
    }
}

impl<R: Read> Iterator for ObservationReader<R> {
    type Item = Result<(u64, f64)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let rec = match self.records.next()? {
                Ok(rec) => rec,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            let y = rec.get(self.cols.y).unwrap_or("");
            if y.is_empty() {
                continue;
            }
            let parse = |field: &str, what: &str| {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: bad {what} value `{field}`", self.line)))
            };
            let n = rec.get(self.cols.n).unwrap_or("");
            let item = parse(n, "n").and_then(|n| {
                let y = parse(y, "y")?;
                if !y.is_finite() {
                    return Err(Error::Config(format!("line {}: observation is not finite", self.line)));
                }
                Ok((n as u64, y))
            });
            return Some(item);
        }
    }
}

/// Reads every observation of a `n,y` or `n,u,y` file, in file order.
pub fn read_observations<R: Read>(input: R) -> Result<Vec<f64>> {
    ObservationReader::new(input)?.map(|r| r.map(|(_, y)| y)).collect()
}

pub fn load_observations(path: &Path) -> Result<Vec<f64>> {
    read_observations(std::fs::File::open(path)?)
}

/// Smoothed state posteriors in long form `n,i,gamma` (both indices from 1).
pub fn write_gamma<W: Write>(gamma: &Array2<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "i", "gamma"])?;
    for ((n, i), &g) in gamma.indexed_iter() {
        w.write_record([(n + 1).to_string(), (i + 1).to_string(), fmt(g)])?;
    }
    w.flush()?;
    Ok(())
}
