use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A simulated observation sequence with the settings that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub model: String,
    pub seed: u64,
    pub sigma: f64,
    /// Parameter values used for simulation, by name.
    pub truth: Vec<(String, f64)>,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    /// Writes `<stem>.csv` (columns `t,y`) and `<stem>.json` (everything
    /// except the observations) into `dir`; returns both paths.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["t", "y"])?;
        for (t, y) in self.times.iter().zip(&self.y) {
            w.write_record([format!("{t:e}"), format!("{y:e}")])?;
        }
        w.flush()?;
        let sidecar = serde_json::json!({
            "model": self.model,
            "seed": self.seed,
            "sigma": self.sigma,
            "truth": self.truth.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect::<serde_json::Map<_, _>>(),
            "n_observations": self.y.len(),
        });
        let mut f = File::create(&json_path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(&sidecar)?)?;
        Ok((csv_path, json_path))
    }

    /// Reads back the observations written by [`Dataset::write`].
    pub fn read_observations(csv_path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut r = csv::Reader::from_path(csv_path)?;
        let mut times = vec![];
        let mut y = vec![];
        for rec in r.deserialize() {
            let (t, v): (f64, f64) = rec?;
            times.push(t);
            y.push(v);
        }
        Ok((times, y))
    }
}
