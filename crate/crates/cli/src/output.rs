//! Versioned CSV files and JSON sidecars.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::SCHEMA_VERSION;
use crate::Result;

/// First line of every CSV the harness writes.
pub fn schema_line() -> String {
    format!("# schema_version={SCHEMA_VERSION}")
}

/// Opens `dir/name` and writes the schema line and `header`.
pub fn csv_writer(dir: &Path, name: &str, header: &[&str]) -> Result<(PathBuf, csv::Writer<BufWriter<File>>)> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut file = BufWriter::new(File::create(&path)?);
    writeln!(file, "{}", schema_line())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    Ok((path, w))
}

/// Seconds since the Unix epoch.
pub fn unix_time() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Run metadata written next to the CSV output.
#[derive(Serialize)]
pub struct Sidecar<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub workers: usize,
    pub outputs: Vec<String>,
    pub config: &'a crate::ExperimentConfig,
    pub details: T,
}

pub fn write_sidecar<T: Serialize>(dir: &Path, name: &str, sidecar: &Sidecar<T>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut f = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, sidecar)?;
    writeln!(f)?;
    f.flush()?;
    Ok(path)
}

/// Reject counts as `metropolis=3;nonreversible=0;...`, in a fixed order.
pub fn format_reject_counts(counts: &[(&str, usize)]) -> String {
    counts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}
