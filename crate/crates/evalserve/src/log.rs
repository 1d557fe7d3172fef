//! Append-only JSON-lines event log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServeError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    /// An instance was served to a rater.
    Assign {
        rater_id: String,
        instance_id: String,
        permutation_seed: u64,
        at_ms: u64,
    },
    /// A rater's choice. `chosen_index` is in presentation order,
    /// `canonical_index` in stored candidate order.
    Response {
        rater_id: String,
        instance_id: String,
        chosen_index: usize,
        canonical_index: usize,
        permutation_seed: u64,
        correct: bool,
        at_ms: u64,
    },
}

impl LogEvent {
    pub fn rater_id(&self) -> &str {
        match self {
            LogEvent::Assign { rater_id, .. } | LogEvent::Response { rater_id, .. } => rater_id,
        }
    }

    pub fn instance_id(&self) -> &str {
        match self {
            LogEvent::Assign { instance_id, .. } | LogEvent::Response { instance_id, .. } => {
                instance_id
            }
        }
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogEvent>, ServeError> {
    let path = path.as_ref();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| ServeError::BadLog {
            path: path.to_owned(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_log(path: impl AsRef<Path>, events: &[LogEvent]) -> Result<(), ServeError> {
    let mut w = LogWriter::create(path)?;
    for e in events {
        w.append(e)?;
    }
    Ok(())
}

/// Appends one line per event and flushes before returning.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ServeError> {
        let path = path.as_ref().to_owned();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(LogWriter { path, file })
    }

    fn create(path: impl AsRef<Path>) -> Result<Self, ServeError> {
        let path = path.as_ref().to_owned();
        let file = File::create(&path)?;
        Ok(LogWriter { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &LogEvent) -> Result<(), ServeError> {
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::from)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}
