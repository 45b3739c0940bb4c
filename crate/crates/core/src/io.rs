//! Plain-text matrix and vector files.
//!
//! Matrix files use a 0-indexed coordinate layout:
//!
//! ```text
//! n_rows n_cols nnz
//! row col value
//! ...
//! ```
//!
//! Triplets may appear in any order; the reader canonicalizes them. Vector
//! files hold one real per line. Reals are written with `{:e}` formatting,
//! which round-trips `f64` exactly.

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub fn format_matrix(a: &CsrMatrix) -> String {
    let mut s = String::with_capacity(24 * (a.nnz() + 1));
    writeln!(s, "{} {} {}", a.n_rows(), a.n_cols(), a.nnz()).unwrap();
    for (i, j, v) in a.triplets() {
        writeln!(s, "{i} {j} {v:e}").unwrap();
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<CsrMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('%'));
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: hline + 1,
            msg: format!("bad header: {e}"),
        })?;
    if h.len() != 3 {
        return Err(Error::Parse {
            line: hline + 1,
            msg: "header must be `n_rows n_cols nnz`".into(),
        });
    }
    let (n_rows, n_cols, nnz) = (h[0], h[1], h[2]);
    let mut trip = Vec::with_capacity(nnz);
    for (ln, line) in lines {
        let perr = |msg: String| Error::Parse { line: ln + 1, msg };
        let mut it = line.split_whitespace();
        let (Some(r), Some(c), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(perr("expected `row col value`".into()));
        };
        let r: usize = r.parse().map_err(|e| perr(format!("row: {e}")))?;
        let c: usize = c.parse().map_err(|e| perr(format!("col: {e}")))?;
        let v: f64 = v.parse().map_err(|e| perr(format!("value: {e}")))?;
        trip.push((r, c, v));
    }
    if trip.len() != nnz {
        return Err(Error::Parse {
            line: hline + 1,
            msg: format!("header announces {nnz} entries, found {}", trip.len()),
        });
    }
    CsrMatrix::from_triplets(n_rows, n_cols, trip)
}

pub fn write_matrix(path: impl AsRef<Path>, a: &CsrMatrix) -> Result<()> {
    fs::write(path, format_matrix(a))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<CsrMatrix> {
    parse_matrix(&fs::read_to_string(path)?)
}

pub fn format_vector(v: &[f64]) -> String {
    let mut s = String::with_capacity(24 * v.len());
    for x in v {
        writeln!(s, "{x:e}").unwrap();
    }
    s
}

pub fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    fs::write(path, format_vector(v))?;
    Ok(())
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    parse_vector(&fs::read_to_string(path)?)
}
