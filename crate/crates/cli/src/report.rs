//! Comparison tables over finished runs.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use hessfree::Result;

use crate::records::{read_rows, Row, Summary};

#[derive(Clone, Debug)]
pub struct RunData {
    pub method: String,
    pub corpus_sha256: Option<String>,
    pub source: PathBuf,
    pub rows: Vec<Row>,
}

impl RunData {
    /// Loads a records CSV. The method name and corpus hash come from the
    /// `summary.txt` beside it when there is one; otherwise the method is
    /// named after the run directory.
    pub fn load(csv: &Path) -> Result<Self> {
        let rows = read_rows(csv)?;
        let summary = csv.with_file_name("summary.txt");
        let (method, hash) = if summary.is_file() {
            Summary::read_identity(&summary)?
        } else {
            (None, None)
        };
        let fallback = || {
            let dir = csv.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str());
            let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            dir.filter(|_| stem == "records").unwrap_or(stem).to_string()
        };
        Ok(RunData {
            method: method.unwrap_or_else(fallback),
            corpus_sha256: hash,
            source: csv.to_path_buf(),
            rows,
        })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.heldout_loss)
    }

    pub fn total_cg(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cum_cg_iters)
    }

    pub fn total_accessed(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cum_accessed_points)
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.rows.iter().fold(0.0, |t, r| t + r.wall_ms)
    }
}

pub struct Report {
    pub table: String,
    pub warnings: Vec<String>,
}

/// Builds the comparison table, one row per run in input order.
pub fn build(runs: &[RunData]) -> Report {
    let mut warnings = Vec::new();
    let hashes: Vec<&str> = runs.iter().filter_map(|r| r.corpus_sha256.as_deref()).collect();
    if hashes.windows(2).any(|w| w[0] != w[1]) {
        let mut msg = String::from("runs were trained on different corpora:");
        for r in runs {
            let h = r.corpus_sha256.as_deref().map_or("unknown", |h| &h[..h.len().min(12)]);
            let _ = write!(msg, " {}={h}", r.source.display());
        }
        warnings.push(msg);
    }
    for r in runs {
        if r.rows.is_empty() {
            warnings.push(format!("{} has no iterations", r.source.display()));
        }
    }

    let header = [
        "Method",
        "Final Loss",
        "HF Iterations",
        "Total CG Iterations",
        "Accessed Points",
        "Wall ms",
    ];
    let mut cells: Vec<[String; 6]> = vec![header.map(String::from)];
    for r in runs {
        cells.push([
            r.method.clone(),
            r.final_loss().map_or("-".into(), |l| format!("{l:.5}")),
            r.rows.len().to_string(),
            r.total_cg().to_string(),
            r.total_accessed().to_string(),
            format!("{:.0}", r.total_wall_ms()),
        ]);
    }
    let mut width = [0usize; 6];
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut table = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(width)
            .enumerate()
            .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        table.push_str(line.join("  ").trim_end());
        table.push('\n');
        if i == 0 {
            let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
            table.push_str(&rule.join("  "));
            table.push('\n');
        }
    }
    Report { table, warnings }
}

/// Writes one plotting series per run: held-out and train loss against
/// iteration, cumulative CG iterations, cumulative accessed points and
/// cumulative wall time. Returns the files written.
pub fn write_series(runs: &[RunData], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let slug: String = r
            .method
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        let path = dir.join(format!("{:02}_{slug}.csv", i + 1));
        let mut out =
            String::from("iter,train_loss,heldout_loss,cum_cg_iters,cum_accessed_points,cum_wall_ms,lambda\n");
        let mut wall = 0.0;
        for row in &r.rows {
            wall += row.wall_ms;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3},{}",
                row.iter, row.train_loss, row.heldout_loss, row.cum_cg_iters, row.cum_accessed_points, wall, row.lambda
            );
        }
        fs::write(&path, out)?;
        written.push(path);
    }
    Ok(written)
}
