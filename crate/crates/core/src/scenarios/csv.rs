//! Flat-file signal and return data.
//!
//! Signals: `time,asset,signal_name,value` with integer step and asset
//! ids. Returns: `time,asset,return`. Every (step, signal, asset) cell
//! must appear exactly once; values print in full 17-digit precision so a
//! write/read round trip is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::model::SignalSet;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected header '{expected}', got '{got}'")]
    Header { path: String, expected: &'static str, got: String },
    #[error("{path} line {line}: {reason}")]
    Row { path: String, line: usize, reason: String },
    #[error("{path}: {what}")]
    Inconsistent { path: String, what: String },
}

fn read_lines(path: &Path) -> Result<Vec<String>, CsvError> {
    let text = fs::read_to_string(path).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn split_row<'a>(
    path: &Path,
    line_no: usize,
    line: &'a str,
    want: usize,
) -> Result<Vec<&'a str>, CsvError> {
    let parts: Vec<&str> = line.split(',').map(|p| p.trim()).collect();
    if parts.len() != want {
        return Err(CsvError::Row {
            path: path.display().to_string(),
            line: line_no,
            reason: format!("expected {want} fields, got {}", parts.len()),
        });
    }
    Ok(parts)
}

fn parse<T: std::str::FromStr>(
    path: &Path,
    line_no: usize,
    field: &str,
    what: &str,
) -> Result<T, CsvError> {
    field.parse().map_err(|_| CsvError::Row {
        path: path.display().to_string(),
        line: line_no,
        reason: format!("cannot parse {what} from '{field}'"),
    })
}

pub fn read_signals_csv(path: &Path) -> Result<SignalSet<f64>, CsvError> {
    let lines = read_lines(path)?;
    let pstr = path.display().to_string();
    let expected = "time,asset,signal_name,value";
    match lines.first() {
        Some(h) if h.trim() == expected => {}
        other => {
            return Err(CsvError::Header {
                path: pstr,
                expected,
                got: other.cloned().unwrap_or_default(),
            })
        }
    }

    let mut names: Vec<String> = Vec::new();
    let mut records = Vec::new();
    let (mut max_t, mut max_a) = (0usize, 0usize);
    for (idx, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parts = split_row(path, line_no, line, 4)?;
        let t: usize = parse(path, line_no, parts[0], "step")?;
        let a: usize = parse(path, line_no, parts[1], "asset id")?;
        let v: f64 = parse(path, line_no, parts[3], "value")?;
        let k = match names.iter().position(|n| n == parts[2]) {
            Some(k) => k,
            None => {
                names.push(parts[2].to_string());
                names.len() - 1
            }
        };
        max_t = max_t.max(t);
        max_a = max_a.max(a);
        records.push((t, k, a, v, line_no));
    }
    if records.is_empty() {
        return Err(CsvError::Inconsistent { path: pstr, what: "no data rows".into() });
    }
    let (steps, k_count, n) = (max_t + 1, names.len(), max_a + 1);
    let mut g = Array3::zeros((steps, k_count, n));
    let mut seen = vec![false; steps * k_count * n];
    for (t, k, a, v, line_no) in records {
        let flat = (t * k_count + k) * n + a;
        if seen[flat] {
            return Err(CsvError::Row {
                path: pstr.clone(),
                line: line_no,
                reason: format!("duplicate cell (step {t}, signal {}, asset {a})", names[k]),
            });
        }
        seen[flat] = true;
        g[[t, k, a]] = v;
    }
    if let Some(flat) = seen.iter().position(|s| !s) {
        let t = flat / (k_count * n);
        let k = (flat / n) % k_count;
        let a = flat % n;
        return Err(CsvError::Inconsistent {
            path: pstr,
            what: format!("missing cell (step {t}, signal {}, asset {a})", names[k]),
        });
    }
    Ok(SignalSet { names, g })
}

pub fn read_returns_csv(path: &Path) -> Result<Array2<f64>, CsvError> {
    let lines = read_lines(path)?;
    let pstr = path.display().to_string();
    let expected = "time,asset,return";
    match lines.first() {
        Some(h) if h.trim() == expected => {}
        other => {
            return Err(CsvError::Header {
                path: pstr,
                expected,
                got: other.cloned().unwrap_or_default(),
            })
        }
    }
    let mut records = Vec::new();
    let (mut max_t, mut max_a) = (0usize, 0usize);
    for (idx, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parts = split_row(path, line_no, line, 3)?;
        let t: usize = parse(path, line_no, parts[0], "step")?;
        let a: usize = parse(path, line_no, parts[1], "asset id")?;
        let v: f64 = parse(path, line_no, parts[2], "return")?;
        max_t = max_t.max(t);
        max_a = max_a.max(a);
        records.push((t, a, v, line_no));
    }
    if records.is_empty() {
        return Err(CsvError::Inconsistent { path: pstr, what: "no data rows".into() });
    }
    let (steps, n) = (max_t + 1, max_a + 1);
    let mut out = Array2::zeros((steps, n));
    let mut seen = vec![false; steps * n];
    for (t, a, v, line_no) in records {
        if seen[t * n + a] {
            return Err(CsvError::Row {
                path: pstr.clone(),
                line: line_no,
                reason: format!("duplicate cell (step {t}, asset {a})"),
            });
        }
        seen[t * n + a] = true;
        out[[t, a]] = v;
    }
    if let Some(flat) = seen.iter().position(|s| !s) {
        return Err(CsvError::Inconsistent {
            path: pstr,
            what: format!("missing cell (step {}, asset {})", flat / n, flat % n),
        });
    }
    Ok(out)
}

fn write_file(path: &Path, body: String) -> Result<(), CsvError> {
    fs::write(path, body).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_signals_csv(path: &Path, signals: &SignalSet<f64>) -> Result<(), CsvError> {
    let mut body = String::from("time,asset,signal_name,value\n");
    for t in 0..signals.steps() {
        for k in 0..signals.k_signals() {
            for a in 0..signals.n_assets() {
                body.push_str(&format!(
                    "{t},{a},{},{:.16e}\n",
                    signals.names[k],
                    signals.g[[t, k, a]]
                ));
            }
        }
    }
    write_file(path, body)
}

pub fn write_returns_csv(path: &Path, returns: &Array2<f64>) -> Result<(), CsvError> {
    let mut body = String::from("time,asset,return\n");
    for t in 0..returns.nrows() {
        for a in 0..returns.ncols() {
            body.push_str(&format!("{t},{a},{:.16e}\n", returns[[t, a]]));
        }
    }
    write_file(path, body)
}
