//! Delimited-text input and output.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! value read back is bit-identical to the one written.

use std::fs;
use std::path::{Path, PathBuf};

use psar::design::Dataset;

use crate::config::DataConfig;
use crate::error::{CliError, CliResult};

/// An in-memory table with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn read(path: &Path) -> CliResult<Table> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::file(path, e))?;
        let header = r
            .headers()
            .map_err(|e| CliError::file(path, e))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::file(path, e))?;
            rows.push(rec.iter().map(String::from).collect());
        }
        Ok(Table { header, rows })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header).map_err(|e| CliError::file(path, e))?;
            for r in &self.rows {
                w.write_record(r).map_err(|e| CliError::file(path, e))?;
            }
            w.flush().map_err(|e| CliError::file(path, e))?;
        }
        write_atomic(path, &buf)
    }

    /// Parses column `name` as numbers; `missing` cells become NaN.
    pub fn numeric_column(&self, path: &Path, name: &str, missing: &[String]) -> CliResult<Vec<f64>> {
        let j = self
            .column_index(name)
            .ok_or_else(|| CliError::file(path, format!("no column named {name}")))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cell = r[j].as_str();
                if missing.iter().any(|m| m == cell) {
                    return Ok(f64::NAN);
                }
                cell.parse::<f64>().map_err(|_| CliError::Cell {
                    path: path.to_path_buf(),
                    row: i + 1,
                    column: name.to_string(),
                    message: format!("cannot parse {cell:?} as a number"),
                })
            })
            .collect()
    }
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = tmp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| CliError::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::file(path, e))
}

pub fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

/// Parses one time cell into an index in units of `step`.
fn time_index(path: &Path, row: usize, column: &str, cell: &str, step: i64) -> CliResult<i64> {
    let bad = |message: String| CliError::Cell {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let t: i64 = match cell.parse::<i64>() {
        Ok(t) => t,
        Err(_) => {
            let f: f64 = cell
                .parse()
                .map_err(|_| bad(format!("cannot parse time {cell:?}")))?;
            if f.fract() != 0.0 || !f.is_finite() || f.abs() > 9e15 {
                return Err(bad(format!("time {cell:?} is not an integer")));
            }
            f as i64
        }
    };
    if t.rem_euclid(step) != 0 {
        return Err(bad(format!("time {t} is not a multiple of the time step {step}")));
    }
    Ok(t / step)
}

/// Reads a dataset with the given covariate columns.
///
/// Missing time stamps, unparseable cells and non-increasing times are data
/// errors; missing responses and covariates become NaN.
pub fn load_dataset(path: &Path, cfg: &DataConfig, covariates: &[String]) -> CliResult<Dataset> {
    let table = Table::read(path)?;
    let tcol = table
        .column_index(&cfg.time)
        .ok_or_else(|| CliError::file(path, format!("no time column named {}", cfg.time)))?;
    let times = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| time_index(path, i + 1, &cfg.time, &r[tcol], cfg.time_step))
        .collect::<CliResult<Vec<i64>>>()?;
    if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
        return Err(CliError::Cell {
            path: path.to_path_buf(),
            row: i + 2,
            column: cfg.time.clone(),
            message: "time stamps must be strictly increasing".into(),
        });
    }
    let response = table.numeric_column(path, &cfg.response, &cfg.missing)?;
    let covs = covariates
        .iter()
        .map(|c| Ok((c.clone(), table.numeric_column(path, c, &cfg.missing)?)))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Dataset::new(times, response, covs)?)
}
