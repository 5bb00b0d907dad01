//! Time grids of states and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    times: Vec<f64>,
    states: DMatrix<f64>,
    noise_variances: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: DMatrix<f64>) -> Result<Self> {
        if times.len() != states.nrows() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: states.nrows(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("times must be strictly increasing".into()));
        }
        Ok(Self {
            times,
            states,
            noise_variances: None,
        })
    }

    /// Build from a list of equally sized state vectors.
    pub fn from_rows(times: Vec<f64>, rows: &[DVector<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("ragged state rows".into()));
        }
        let states = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(times, states)
    }

    /// Uniform grid `t0 + k h` for the given rows.
    pub fn uniform(t0: f64, h: f64, rows: &[DVector<f64>]) -> Result<Self> {
        let times = (0..rows.len()).map(|k| t0 + k as f64 * h).collect();
        Self::from_rows(times, rows)
    }

    pub fn with_noise_variances(mut self, variances: Vec<f64>) -> Result<Self> {
        if variances.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: variances.len(),
            });
        }
        self.noise_variances = Some(variances);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn noise_variances(&self) -> Option<&[f64]> {
        self.noise_variances.as_deref()
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.states.row(k).transpose()
    }

    pub fn rows(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|k| self.state(k)).collect()
    }

    pub fn last_state(&self) -> Option<DVector<f64>> {
        (!self.is_empty()).then(|| self.state(self.len() - 1))
    }

    /// First `n` rows.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            times: self.times[..n].to_vec(),
            states: self.states.rows(0, n).into_owned(),
            noise_variances: self.noise_variances.clone(),
        }
    }

    /// True when both trajectories share the same time grid to `tol`.
    pub fn same_grid(&self, other: &Self, tol: f64) -> bool {
        self.len() == other.len()
            && self.dim() == other.dim()
            && self.times.iter().zip(&other.times).all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![format_f64(self.times[k])];
            rec.extend(self.states.row(k).iter().map(|v| format_f64(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::Parse("first column must be 't'".into()));
        }
        let d = header.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(Error::Parse(format!("expected {} fields, got {}", d + 1, rec.len())));
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad number '{field}'")))?;
                if j == 0 {
                    times.push(v);
                } else {
                    values.push(v);
                }
            }
        }
        let n = times.len();
        Self::new(times, DMatrix::from_row_slice(n, d, &values))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}
