//! CSV and JSON artifacts.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a read
//! after a write returns identical bits and reruns produce identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{PathEnsemble, PathKind, SamplePath, TimeGrid};
use crate::reflection::ReflectedPath;
use crate::solver::PicardTrace;

/// Grid, dimension, size and seed provenance of a stored ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n: usize,
    pub kind: PathKind,
    /// Named seeds used to produce the ensemble.
    pub seeds: Vec<(String, u64)>,
}

impl EnsembleManifest {
    pub fn describe(ens: &PathEnsemble, seeds: Vec<(String, u64)>) -> Self {
        Self { grid: *ens.grid(), dim: ens.dim(), n: ens.len(), kind: ens.kind(), seeds }
    }
}

/// Gaps and status of a Picard run, without the iterates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub successive_gaps: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl<S> From<&PicardTrace<S>> for TraceRecord {
    fn from(t: &PicardTrace<S>) -> Self {
        Self {
            successive_gaps: t.successive_gaps.clone(),
            converged: t.converged,
            iterations_used: t.iterations_used,
        }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Header `t, 0:0, 0:1, ..., (N-1):(d-1)` then one row per node.
pub fn write_ensemble_csv(path: impl AsRef<Path>, ens: &PathEnsemble) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = ens.dim();
    let mut header = vec!["t".to_string()];
    for i in 0..ens.len() {
        header.extend((0..d).map(|c| format!("{i}:{c}")));
    }
    w.write_record(&header)?;
    let grid = ens.grid();
    for j in 0..grid.n_nodes() {
        let mut row = Vec::with_capacity(1 + d * ens.len());
        row.push(fmt(grid.time(j)));
        for m in ens.iter() {
            row.extend(m.at(j).iter().map(|&v| fmt(v)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_member_header(h: &str) -> Result<(usize, usize)> {
    let (i, c) = h.split_once(':').ok_or_else(|| Error::Malformed(format!("bad column header {h:?}")))?;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Malformed(format!("bad column header {h:?}")));
    Ok((parse(i)?, parse(c)?))
}

/// Reads an ensemble written by [`write_ensemble_csv`]. The grid is rebuilt
/// from the horizon (last `t`) and the row count.
pub fn read_ensemble_csv(path: impl AsRef<Path>, kind: PathKind) -> Result<PathEnsemble> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.get(0) != Some("t") || headers.len() < 2 {
        return Err(Error::Malformed("expected a leading t column and at least one member".into()));
    }
    let cols: Vec<(usize, usize)> = headers.iter().skip(1).map(parse_member_header).collect::<Result<_>>()?;
    let d = cols.iter().map(|c| c.1).max().expect("nonempty") + 1;
    if !cols.len().is_multiple_of(d) {
        return Err(Error::Malformed("column count is not a multiple of the dimension".into()));
    }
    let n = cols.len() / d;
    for (k, &(i, c)) in cols.iter().enumerate() {
        if i != k / d || c != k % d {
            return Err(Error::Malformed(format!("column {} out of order", k + 1)));
        }
    }
    let mut times = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n];
    for rec in r.records() {
        let rec = rec?;
        let parsed: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Malformed(format!("bad number {s:?}"))))
            .collect::<Result<_>>()?;
        times.push(parsed[0]);
        for (i, v) in values.iter_mut().enumerate() {
            v.extend_from_slice(&parsed[1 + i * d..1 + (i + 1) * d]);
        }
    }
    if times.len() < 2 || times[0] != 0.0 {
        return Err(Error::Malformed("need at least two rows starting at t = 0".into()));
    }
    let grid = TimeGrid::new(*times.last().expect("nonempty"), times.len() - 1)?;
    let members = values.into_iter().map(|v| SamplePath::new(grid, d, v)).collect::<Result<Vec<_>>>()?;
    PathEnsemble::with_kind(members, kind)
}

/// Header `t`, then per member `i:x:c`, `i:k:c`, `i:tv`.
pub fn write_reflected_csv(path: impl AsRef<Path>, paths: &[ReflectedPath]) -> Result<()> {
    let first = paths.first().ok_or_else(|| Error::InvalidParameter("no paths to write".into()))?;
    let grid = *first.grid();
    let d = first.x.dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    for i in 0..paths.len() {
        header.extend((0..d).map(|c| format!("{i}:x:{c}")));
        header.extend((0..d).map(|c| format!("{i}:k:{c}")));
        header.push(format!("{i}:tv"));
    }
    w.write_record(&header)?;
    for j in 0..grid.n_nodes() {
        let mut row = vec![fmt(grid.time(j))];
        for p in paths {
            if p.grid() != &grid || p.x.dim() != d {
                return Err(Error::GridMismatch);
            }
            row.extend(p.x.at(j).iter().map(|&v| fmt(v)));
            row.extend(p.k.at(j).iter().map(|&v| fmt(v)));
            row.push(fmt(p.tv[j]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain numeric table with the given header.
pub fn write_table_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::SizeMismatch { left: header.len(), right: row.len() });
        }
        w.write_record(row.iter().map(|&v| fmt(v)))?;
    }
    w.flush()?;
    Ok(())
}
