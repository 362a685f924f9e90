//! The per-iteration CSV and the run summary.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use hessfree::hf::IterationRecord;
use hessfree::{Error, Result};

/// Column order is part of the file contract; tooling matches it byte for byte.
pub const CSV_HEADER: [&str; 16] = [
    "iter",
    "train_loss",
    "heldout_loss",
    "cg_iters",
    "cum_cg_iters",
    "grad_utts",
    "grad_frames",
    "cg_utts",
    "cg_frames",
    "accessed_points",
    "cum_accessed_points",
    "lambda",
    "rho",
    "alpha",
    "accepted_index",
    "wall_ms",
];

pub const WALL_MS_COLUMN: usize = 15;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

pub fn record_fields(r: &IterationRecord) -> [String; 16] {
    [
        r.iter.to_string(),
        r.train_loss.to_string(),
        r.heldout_loss.to_string(),
        r.cg_iters.to_string(),
        r.cum_cg_iters.to_string(),
        r.grad_utts.to_string(),
        r.grad_frames.to_string(),
        r.cg_utts.to_string(),
        r.cg_frames.to_string(),
        r.accessed_points.to_string(),
        r.cum_accessed_points.to_string(),
        r.lambda.to_string(),
        r.rho.map(|v| v.to_string()).unwrap_or_default(),
        r.alpha.to_string(),
        r.accepted_index.map(|v| v.to_string()).unwrap_or_default(),
        format!("{:.3}", r.wall_ms),
    ]
}

/// Writes `records.csv`, flushing after every row.
pub struct RecordWriter {
    inner: csv::Writer<File>,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(csv_err)?;
        inner.write_record(CSV_HEADER).map_err(csv_err)?;
        inner.flush()?;
        Ok(RecordWriter { inner })
    }

    pub fn write(&mut self, r: &IterationRecord) -> Result<()> {
        self.inner.write_record(record_fields(r)).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// One parsed CSV row. Only the columns the report needs are typed.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub iter: u32,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub cg_iters: u64,
    pub cum_cg_iters: u64,
    pub accessed_points: u64,
    pub cum_accessed_points: u64,
    pub lambda: f64,
    pub rho: Option<f64>,
    pub accepted: bool,
    pub wall_ms: f64,
}

/// Reads a records CSV, checking the header and the cumulative columns.
pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let bad = |line: usize, msg: &str| Error::Config(format!("{}: line {line}: {msg}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    let (mut cg, mut pts) = (0u64, 0u64);
    let mut header_seen = false;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(i + 1, &format!("{e}")))?;
        if i == 0 {
            if rec.iter().ne(CSV_HEADER.iter().copied()) {
                return Err(bad(1, "header does not match the records schema"));
            }
            header_seen = true;
            continue;
        }
        if rec.len() != CSV_HEADER.len() {
            return Err(bad(
                i + 1,
                &format!("expected {} fields, got {}", CSV_HEADER.len(), rec.len()),
            ));
        }
        let f = |col: usize| -> Result<f64> {
            rec[col].parse().map_err(|_| {
                bad(
                    i + 1,
                    &format!("column {} is not a number: `{}`", CSV_HEADER[col], &rec[col]),
                )
            })
        };
        let u = |col: usize| -> Result<u64> {
            rec[col].parse().map_err(|_| {
                bad(
                    i + 1,
                    &format!("column {} is not an integer: `{}`", CSV_HEADER[col], &rec[col]),
                )
            })
        };
        let row = Row {
            iter: u(0)? as u32,
            train_loss: f(1)?,
            heldout_loss: f(2)?,
            cg_iters: u(3)?,
            cum_cg_iters: u(4)?,
            accessed_points: u(9)?,
            cum_accessed_points: u(10)?,
            lambda: f(11)?,
            rho: if rec[12].is_empty() { None } else { Some(f(12)?) },
            accepted: !rec[14].is_empty(),
            wall_ms: f(WALL_MS_COLUMN)?,
        };
        cg += row.cg_iters;
        pts += row.accessed_points;
        if row.cum_cg_iters != cg || row.cum_accessed_points != pts {
            return Err(bad(i + 1, "cumulative columns disagree with the running sums"));
        }
        rows.push(row);
    }
    if !header_seen {
        return Err(bad(1, "missing header"));
    }
    Ok(rows)
}

/// Run totals; every total is the column sum of the records.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub method: String,
    pub corpus: String,
    pub corpus_sha256: String,
    pub final_heldout_loss: f64,
    pub hf_iterations: usize,
    pub accepted_iterations: usize,
    pub total_cg_iterations: u64,
    pub total_accessed_points: u64,
    pub total_wall_ms: f64,
}

impl Summary {
    /// With no records every numeric field is zero.
    pub fn from_records(method: String, corpus: String, corpus_sha256: String, recs: &[IterationRecord]) -> Self {
        Summary {
            method,
            corpus,
            corpus_sha256,
            final_heldout_loss: recs.last().map_or(0.0, |r| r.heldout_loss),
            hf_iterations: recs.len(),
            accepted_iterations: recs.iter().filter(|r| r.accepted()).count(),
            total_cg_iterations: recs.iter().map(|r| r.cg_iters as u64).sum(),
            total_accessed_points: recs.iter().map(|r| r.accessed_points).sum(),
            total_wall_ms: recs.iter().fold(0.0, |t, r| t + r.wall_ms),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = Vec::new();
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "corpus = {}", self.corpus);
        let _ = writeln!(s, "corpus_sha256 = {}", self.corpus_sha256);
        let _ = writeln!(s, "final_heldout_loss = {}", self.final_heldout_loss);
        let _ = writeln!(s, "hf_iterations = {}", self.hf_iterations);
        let _ = writeln!(s, "accepted_iterations = {}", self.accepted_iterations);
        let _ = writeln!(s, "total_cg_iterations = {}", self.total_cg_iterations);
        let _ = writeln!(s, "total_accessed_points = {}", self.total_accessed_points);
        let _ = writeln!(s, "total_wall_ms = {:.3}", self.total_wall_ms);
        String::from_utf8(s).expect("summary is ascii")
    }

    /// Reads the `method` and `corpus_sha256` entries of a summary file;
    /// other keys are ignored.
    pub fn read_identity(path: &Path) -> Result<(Option<String>, Option<String>)> {
        let text = std::fs::read_to_string(path)?;
        let mut method = None;
        let mut hash = None;
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "method" => method = Some(v.trim().to_string()),
                    "corpus_sha256" => hash = Some(v.trim().to_string()),
                    _ => {}
                }
            }
        }
        Ok((method, hash))
    }
}
