//! Run manifest and the append-only trial log used for resuming.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::TrialKey;
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, Outcome};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIAL_LOG_FILE: &str = "trials.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub template_version: String,
    pub state: RunState,
    pub created_at: u64,
    pub updated_at: u64,
    pub total_trials: usize,
    /// Trial key to terminal outcome.
    pub trials: BTreeMap<String, Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: String, template_version: String, total_trials: usize) -> Self {
        let now = unix_now();
        Self {
            config_hash,
            template_version,
            state: RunState::Running,
            created_at: now,
            updated_at: now,
            total_trials,
            trials: BTreeMap::new(),
            abort_reason: None,
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = Self::path(dir);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.updated_at = unix_now();
        let path = Self::path(dir);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct LoggedTrial {
    pub key: String,
    pub record: EvalRecord,
    #[serde(default)]
    pub hit_flat: Option<f64>,
    #[serde(default)]
    pub masked_count: usize,
}

/// Reads the trial log, dropping a torn final line, and rewrites it so new
/// records append cleanly.
pub(crate) fn recover_log(dir: &Path) -> Result<BTreeMap<String, LoggedTrial>> {
    let path = dir.join(TRIAL_LOG_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if let Ok(t) = serde_json::from_str::<LoggedTrial>(line) {
            out.insert(t.key.clone(), t);
        }
    }
    let mut clean = String::new();
    for t in out.values() {
        clean.push_str(&serde_json::to_string(t)?);
        clean.push('\n');
    }
    fs::write(&path, clean).map_err(|e| Error::io(path, e))?;
    Ok(out)
}

pub(crate) struct TrialLog {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl TrialLog {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(TRIAL_LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path,
        })
    }

    pub fn append(&mut self, trial: &LoggedTrial) -> Result<()> {
        let line = serde_json::to_string(trial)?;
        writeln!(self.writer, "{line}")
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) fn key_string(key: &TrialKey) -> String {
    key.to_string()
}
