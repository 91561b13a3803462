use std::io::{BufRead, BufReader, Read, Write};

use super::PenaltyConfig;
use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::problem::Regime;

/// Metrics of one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub t: usize,
    /// φ_t, the iterate at which the hypergradient was taken.
    pub phi: ParamVec,
    /// ‖d_t‖
    pub d_norm: f64,
    /// G(φ_t, λ′^K_t)
    pub upper_loss: f64,
    /// J(φ_t, λ^K_t)
    pub lower_value: f64,
    /// ‖d_{K−1}‖ of the λ stream.
    pub inner_d_norm: f64,
    /// ‖d′_{K−1}‖ of the λ′ stream.
    pub inner_dp_norm: f64,
    /// Cumulative samples charged through iteration t.
    pub samples: u64,
}

/// Everything a run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: PenaltyConfig,
    pub seed: u64,
    pub regime: Regime,
    pub phi0: ParamVec,
    pub lambda0: ParamVec,
    pub lambda_prime0: ParamVec,
    pub rows: Vec<RunRow>,
    pub final_phi: ParamVec,
    pub final_lambda: ParamVec,
    pub final_lambda_prime: ParamVec,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

const FIXED_COLUMNS: [&str; 7] =
    ["t", "d_norm", "upper_loss", "lower_value", "inner_d_norm", "inner_dp_norm", "samples"];

impl RunRecord {
    pub(crate) fn new(
        config: PenaltyConfig,
        seed: u64,
        regime: Regime,
        phi0: ParamVec,
        lambda0: ParamVec,
        lambda_prime0: ParamVec,
    ) -> Self {
        RunRecord {
            config,
            seed,
            regime,
            final_phi: phi0.clone(),
            final_lambda: lambda0.clone(),
            final_lambda_prime: lambda_prime0.clone(),
            phi0,
            lambda0,
            lambda_prime0,
            rows: Vec::new(),
            aborted: None,
        }
    }

    /// Cumulative samples after the last completed iteration.
    pub fn total_samples(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.samples)
    }

    /// CSV header: the fixed columns followed by `phi_0 .. phi_{d−1}`.
    pub fn csv_header(phi_dim: usize) -> String {
        let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        cols.extend((0..phi_dim).map(|i| format!("phi_{i}")));
        cols.join(",")
    }

    /// One row per outer iteration.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::csv_header(self.phi0.dim()))?;
        for r in &self.rows {
            write!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{}",
                r.t, r.d_norm, r.upper_loss, r.lower_value, r.inner_d_norm, r.inner_dp_norm, r.samples
            )?;
            for v in r.phi.iter() {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Parses rows written by [`RunRecord::write_csv`].
    pub fn read_csv_rows<R: Read>(input: R) -> Result<Vec<RunRow>> {
        let mut lines = BufReader::new(input).lines();
        let header = lines.next().ok_or(Error::Parse { line: 1, message: "empty CSV".into() })??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() <= FIXED_COLUMNS.len() || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
            return Err(Error::Parse { line: 1, message: format!("unexpected header `{header}`") });
        }
        let phi_dim = cols.len() - FIXED_COLUMNS.len();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: line_no, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(err(format!("expected {} fields, found {}", cols.len(), f.len())));
            }
            let real = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
            let phi: Vec<f64> = f[FIXED_COLUMNS.len()..].iter().map(|s| real(s)).collect::<Result<_>>()?;
            if phi.len() != phi_dim {
                return Err(err("phi width mismatch".into()));
            }
            rows.push(RunRow {
                t: f[0].parse().map_err(|_| err(format!("bad iteration `{}`", f[0])))?,
                d_norm: real(f[1])?,
                upper_loss: real(f[2])?,
                lower_value: real(f[3])?,
                inner_d_norm: real(f[4])?,
                inner_dp_norm: real(f[5])?,
                samples: f[6].parse().map_err(|_| err(format!("bad sample count `{}`", f[6])))?,
                phi: ParamVec::new(phi).map_err(|e| err(e.to_string()))?,
            });
        }
        Ok(rows)
    }
}
