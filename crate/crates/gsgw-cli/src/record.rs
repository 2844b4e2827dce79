//! Result records and the serialization helpers behind them.
//!
//! Every command emits one [`ResultRecord`] per seed: a run id derived from
//! the config digest, the metric values the run produced, and its wall
//! times. Metrics and timings live in separate maps on purpose — rerunning
//! a command with the same config and seed reproduces every metric bitwise,
//! while timings never repeat, so determinism checks compare exactly the
//! metrics block. The record is written as pretty JSON next to the other
//! artifacts and appended to `records.jsonl`, one line per run, as an
//! append-only log. All artifact writes go through a temp-file-plus-rename,
//! so readers never observe a half-written file; the log is the one
//! deliberate exception (append is the whole point).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gsgw::mesh_io::write_atomic;

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Digest of (config hash, command, seed): stable across reruns,
    /// distinct across seeds.
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Deterministic outputs; bitwise reproducible for a fixed config+seed.
    pub metrics: BTreeMap<String, f64>,
    /// Measured wall times and values derived from them.
    pub timings_ms: BTreeMap<String, f64>,
    /// File names of the run's outputs, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl ResultRecord {
    pub fn new(command: &str, seed: u64, config_hash: &str) -> ResultRecord {
        let digest = Sha256::digest(format!("{config_hash}:{command}:{seed}").as_bytes());
        let mut run_id = String::with_capacity(16);
        for b in &digest[..8] {
            run_id.push_str(&format!("{b:02x}"));
        }
        ResultRecord {
            run_id,
            command: command.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            metrics: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    /// `<command>_<run_id>` — the shared stem of this run's artifact names.
    pub fn prefix(&self) -> String {
        format!("{}_{}", self.command, self.run_id)
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        assert!(value.is_finite(), "metric {name} is not finite: {value}");
        self.metrics.insert(name.to_string(), value);
    }

    pub fn timing(&mut self, name: &str, ms: f64) {
        self.timings_ms.insert(name.to_string(), ms);
    }

    pub fn artifact(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }
}

pub fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Shortest decimal representation that parses back to the same double.
pub fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn write_json(path: &Path, record: &ResultRecord) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(record).expect("record serialization is total");
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<ResultRecord> {
    let bytes = std::fs::read(path).map_err(gsgw::GsgwError::from)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        crate::error::CliError::from(gsgw::GsgwError::Parse {
            path: path.display().to_string(),
            location: format!("line {}", e.line()),
            message: e.to_string(),
        })
    })
}

pub fn append_log(dir: &Path, record: &ResultRecord) -> Result<()> {
    let line = serde_json::to_string(record).expect("record serialization is total");
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("records.jsonl"))
        .map_err(gsgw::GsgwError::from)?;
    writeln!(file, "{line}").map_err(gsgw::GsgwError::from)?;
    Ok(())
}

/// CSV with a fixed header, LF line endings, values already formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "ragged CSV row");
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}
