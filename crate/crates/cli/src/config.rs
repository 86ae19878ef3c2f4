use std::io::Write;
use std::path::{Path, PathBuf};

use gradvision::{Error, Result};
use nalgebra::Matrix3;

/// Settings shared by the optimization demos.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub levels: usize,
    /// Iterations per pyramid level.
    pub iters: usize,
    pub lr: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iters == 0 {
            return Err(Error::Parameter(format!(
                "levels and iterations must be at least 1, got {} and {}",
                self.levels, self.iters
            )));
        }
        for (name, v) in [("lr", self.lr), ("alpha", self.alpha), ("lambda", self.lambda), ("beta", self.beta)] {
            if !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be finite, got {v}")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `(iteration, level, loss)` rows; iterations count across levels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<(usize, usize, f64)>,
}

impl Trace {
    pub fn push(&mut self, level: usize, loss: f64) {
        self.rows.push((self.rows.len(), level, loss));
    }

    pub fn first(&self) -> Option<f64> {
        self.rows.first().map(|r| r.2)
    }

    pub fn last(&self) -> Option<f64> {
        self.rows.last().map(|r| r.2)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iteration,level,loss")?;
        for (i, l, v) in &self.rows {
            writeln!(w, "{i},{l},{v}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Fails with an optimization error on a non-finite loss.
pub fn check_finite(loss: f64, level: usize, iter: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Optimization(format!("loss became {loss} at level {level}, iteration {iter}")))
    }
}

/// Parses a 3×3 matrix written as three lines of three numbers. Blank
/// lines and lines starting with `#` are skipped.
pub fn parse_matrix3(text: &str) -> Result<Matrix3<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("bad number `{t}`: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.len() != 3 || rows.iter().any(|r| r.len() != 3) {
        return Err(Error::Format("matrix file needs 3 lines of 3 numbers".into()));
    }
    Ok(Matrix3::from_fn(|r, c| rows[r][c]))
}

pub fn format_matrix3(m: &Matrix3<f64>) -> String {
    (0..3).map(|r| format!("{} {} {}\n", m[(r, 0)], m[(r, 1)], m[(r, 2)])).collect()
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) | Error::Usage(_) => 2,
        Error::Shape(_) => 3,
        Error::Estimation(_) | Error::NoConsensus { .. } | Error::DegeneratePoint(_) | Error::BehindCamera(_) => 4,
        Error::Optimization(_) => 5,
        Error::Format(_) => 6,
        Error::Io(_) => 7,
    }
}
