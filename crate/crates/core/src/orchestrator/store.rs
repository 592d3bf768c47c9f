//! Persistent record store: append-only JSON lines, one `RationaleRecord`
//! per line, the last line for an item id winning. Appending snapshots
//! instead of rewriting keeps partial runs crash-tolerant and diffs
//! readable.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::orchestrator::{OrchestratorError, RationaleRecord};

pub struct RecordStore {
    path: PathBuf,
}

impl RecordStore {
    pub fn open(path: impl Into<PathBuf>) -> Self {
        RecordStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Current state: last record per item id. A missing file is an empty
    /// store.
    pub fn load(&self) -> Result<BTreeMap<String, RationaleRecord>, OrchestratorError> {
        let file = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
            Err(source) => {
                return Err(OrchestratorError::Io {
                    path: self.path.display().to_string(),
                    source,
                })
            }
        };
        let mut records = BTreeMap::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| OrchestratorError::Io {
                path: self.path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: RationaleRecord =
                serde_json::from_str(&line).map_err(|source| OrchestratorError::ParseAt {
                    path: self.path.display().to_string(),
                    line: idx + 1,
                    source,
                })?;
            records.insert(record.item_id.clone(), record);
        }
        Ok(records)
    }

    /// Append snapshots. Order is preserved; callers pass records in
    /// dataset order so reruns produce byte-identical files.
    pub fn append(&self, records: &[RationaleRecord]) -> Result<(), OrchestratorError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut out = String::new();
        for record in records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|source| OrchestratorError::Io {
                path: self.path.display().to_string(),
                source,
            })?;
        file.write_all(out.as_bytes())
            .map_err(|source| OrchestratorError::Io {
                path: self.path.display().to_string(),
                source,
            })
    }
}
