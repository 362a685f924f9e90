//! Experiment harness behind the `hessfree` binary: corpus generation,
//! config-driven training runs with CSV output, and run comparison tables.

// `!(x > 0.0)` is deliberate throughout: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod records;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use hessfree::corpus::{self, GenParams};
use hessfree::hf::{train, NetObjective};
use hessfree::model::{init_params, NetworkSpec};
use hessfree::{Error, Result};
use sha2::{Digest, Sha256};

pub use config::RunConfig;
pub use records::{RecordWriter, Summary, CSV_HEADER};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Maps a library error onto the process exit-code contract.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Generates a corpus, writes it to `out` and returns a one-line summary.
pub fn cmd_gen(params: &GenParams, out: &Path) -> Result<String> {
    let c = corpus::generate(params)?;
    let bytes = corpus::to_bytes(&c)?;
    fs::write(out, &bytes)?;
    Ok(format!(
        "wrote {}: {} classes, dim {}, {} train utterances ({} frames), {} held-out ({} frames), sha256 {}",
        out.display(),
        c.classes,
        c.feature_dim,
        c.train.len(),
        c.train_frames(),
        c.heldout.len(),
        c.heldout_frames(),
        sha256_hex(&bytes)
    ))
}

/// Runs one training experiment, writing `records.csv` and `summary.txt`
/// into `out_dir`. Records are flushed as they are produced, so a run that
/// fails part-way leaves the iterations it completed on disk.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<Summary> {
    cfg.validate()?;
    if !cfg.corpus.is_file() {
        return Err(Error::Config(format!(
            "corpus file {} does not exist",
            cfg.corpus.display()
        )));
    }
    let bytes = fs::read(&cfg.corpus)?;
    let data = corpus::from_bytes(&bytes)?;
    let spec = NetworkSpec::new(cfg.layer_sizes.clone(), cfg.seed)?;
    let mut objective = NetObjective::new(&spec, &data, workers)?;

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    let mut writer = RecordWriter::create(&out_dir.join("records.csv"))?;
    let mut write_err = None;
    let outcome = train(&mut objective, init_params(&spec), &cfg.train_config(), |rec| {
        if write_err.is_none() {
            write_err = writer.write(rec).err();
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let outcome = outcome?;
    let summary = Summary::from_records(
        cfg.label(),
        cfg.corpus.display().to_string(),
        sha256_hex(&bytes),
        &outcome.records,
    );
    fs::write(out_dir.join("summary.txt"), summary.to_text())?;
    Ok(summary)
}

/// Output directory for a run: explicit flag, then the config's `output`,
/// then `<config stem>.out` beside the config file.
pub fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig, config_path: &Path) -> PathBuf {
    flag.or_else(|| cfg.output.clone()).unwrap_or_else(|| {
        let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        config_path.with_file_name(format!("{stem}.out"))
    })
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
