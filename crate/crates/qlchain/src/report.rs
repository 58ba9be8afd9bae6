//! CSV and run-manifest emission.
//!
//! Everything written to disk goes through [`write_atomic`], and every data
//! file lands in the manifest together with its SHA-256, so a finished output
//! directory is self-describing: the manifest echoes the configuration, the
//! seed, stage timings, disorder rejection counts, and the exact bytes of
//! each artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// One CSV cell. Index-like columns stay integers; physical values are
/// 64-bit floats rendered with 17 significant digits so they parse back
/// bit-identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
}

impl Cell {
    fn render(&self) -> String {
        match *self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.16e}"),
        }
    }

    fn order(&self, other: &Cell) -> std::cmp::Ordering {
        match (self, other) {
            (Cell::Int(a), Cell::Int(b)) => a.cmp(b),
            (Cell::Float(a), Cell::Float(b)) => a.total_cmp(b),
            // Columns are homogeneous; a mixed comparison means the table
            // was assembled inconsistently, but order it anyway.
            (Cell::Int(a), Cell::Float(b)) => (*a as f64).total_cmp(b),
            (Cell::Float(a), Cell::Int(b)) => a.total_cmp(&(*b as f64)),
        }
    }
}

/// In-memory CSV with a fixed column contract. Rows are sorted canonically
/// (lexicographic across columns) before rendering, so the emitted bytes do
/// not depend on the order parallel workers delivered them.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row arity mismatch");
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.order(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &rows {
            let line: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Writes through a sibling temporary file and renames into place, so a
/// crash never leaves a half-written artifact under the final name.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(data)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

/// A finished unit of ensemble work, keyed the same way the substream RNG
/// is: by the (seed, realization index) pair. Resumed runs skip these.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CompletedJob {
    pub seed: u64,
    pub index: u64,
    /// Value the job produced, so a resume can rebuild summaries without
    /// recomputing.
    pub value: f64,
    /// Retries the disorder draw needed before the solver accepted it.
    pub resamples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub verb: String,
    pub seed: u64,
    /// Configuration echo, canonical key order.
    pub config: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub stages: Vec<StageRecord>,
    /// Total disorder-draw retries across all ensemble jobs.
    pub rejections: u64,
    /// Scalar results worth finding without parsing CSVs.
    pub metrics: BTreeMap<String, f64>,
    pub completed: Vec<CompletedJob>,
    pub outputs: Vec<OutputRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(verb: &str, seed: u64, config: BTreeMap<String, String>) -> RunManifest {
        RunManifest {
            version: concat!("qlchain-v", env!("CARGO_PKG_VERSION")).to_string(),
            verb: verb.to_string(),
            seed,
            config,
            started_unix: now_unix(),
            finished_unix: None,
            stages: Vec::new(),
            rejections: 0,
            metrics: BTreeMap::new(),
            completed: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Writes a data file atomically and records it with its hash,
    /// replacing any previous record under the same name.
    pub fn emit(&mut self, dir: &Path, name: &str, data: &[u8]) -> Result<()> {
        write_atomic(&dir.join(name), data)?;
        let record = OutputRecord { file: name.to_string(), sha256: sha256_hex(data) };
        self.outputs.retain(|o| o.file != name);
        self.outputs.push(record);
        Ok(())
    }

    pub fn emit_table(&mut self, dir: &Path, name: &str, table: &Table) -> Result<()> {
        self.emit(dir, name, table.render().as_bytes())
    }

    /// Runs `body` as a named stage and records its wall-clock duration.
    pub fn stage<T>(&mut self, name: &str, body: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = std::time::Instant::now();
        let out = body(self)?;
        self.stages.push(StageRecord { stage: name.to_string(), seconds: t0.elapsed().as_secs_f64() });
        Ok(out)
    }

    pub fn finish(&mut self) {
        self.finished_unix = Some(now_unix());
    }

    pub fn is_completed(&self, seed: u64, index: u64) -> Option<&CompletedJob> {
        self.completed.iter().find(|c| c.seed == seed && c.index == index)
    }

    pub fn record_completed(&mut self, job: CompletedJob) {
        if self.is_completed(job.seed, job.index).is_none() {
            self.rejections += job.resamples;
            self.completed.push(job);
            // Canonical order, so the manifest does not depend on worker
            // scheduling or on where a resume picked up.
            self.completed.sort_unstable_by_key(|j| (j.seed, j.index));
        }
    }

    /// A manifest can only seed a resume if it describes the same work:
    /// same verb, same seed, same configuration echo.
    pub fn resume_compatible(&self, verb: &str, seed: u64, config: &BTreeMap<String, String>) -> Result<()> {
        if self.verb != verb {
            return Err(Error::Config(format!(
                "manifest records verb `{}`, cannot resume `{verb}`",
                self.verb
            )));
        }
        if self.seed != seed || &self.config != config {
            return Err(Error::Config(
                "manifest seed/config differ from the requested run; refusing to resume".into(),
            ));
        }
        Ok(())
    }
}
