//! Append-only JSON-lines stores: entity history and dead letters.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{FlowError, FlowRecord};
use crate::entity::{Entity, EntityId};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub entity_id: EntityId,
    pub entity_type: String,
    pub attribute: String,
    pub value: Value,
    pub recorded_at: Timestamp,
}

impl HistoryRecord {
    /// One record per attribute of the snapshot, in attribute order.
    pub fn from_snapshot(e: &Entity, recorded_at: Timestamp) -> Vec<HistoryRecord> {
        e.attributes()
            .iter()
            .map(|(name, attr)| HistoryRecord {
                entity_id: e.id().clone(),
                entity_type: e.entity_type().to_string(),
                attribute: name.clone(),
                value: attr.simple_value(),
                recorded_at,
            })
            .collect()
    }
}

struct Inner {
    file: Option<File>,
    records: Vec<HistoryRecord>,
}

/// The twin's historical database. Kept in memory and, when a path is set,
/// mirrored to a JSON-lines file.
pub struct HistoryStore {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for HistoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HistoryStore")
            .field("path", &self.path)
            .field("len", &self.len())
            .finish()
    }
}

impl Default for HistoryStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl HistoryStore {
    pub fn in_memory() -> Self {
        HistoryStore {
            path: None,
            inner: Mutex::new(Inner {
                file: None,
                records: Vec::new(),
            }),
        }
    }

    /// Opens (creating if needed) a history file, loading existing lines.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, FlowError> {
        let path = path.into();
        let records = if path.exists() { Self::read(&path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| FlowError::StorageFailure(format!("{}: {e}", path.display())))?;
        Ok(HistoryStore {
            path: Some(path),
            inner: Mutex::new(Inner {
                file: Some(file),
                records,
            }),
        })
    }

    pub fn read(path: &Path) -> Result<Vec<HistoryRecord>, FlowError> {
        let f = File::open(path).map_err(|e| FlowError::StorageFailure(format!("{}: {e}", path.display())))?;
        BufReader::new(f)
            .lines()
            .map(|l| l.map_err(|e| FlowError::StorageFailure(e.to_string())))
            .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
            .map(|l| serde_json::from_str(&l?).map_err(|e| FlowError::StorageFailure(e.to_string())))
            .collect()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, records: &[HistoryRecord]) -> Result<usize, FlowError> {
        let mut inner = self.inner.lock();
        if let Some(f) = inner.file.as_mut() {
            let mut buf = Vec::new();
            for r in records {
                serde_json::to_writer(&mut buf, r).map_err(|e| FlowError::StorageFailure(e.to_string()))?;
                buf.push(b'\n');
            }
            f.write_all(&buf)
                .map_err(|e| FlowError::StorageFailure(e.to_string()))?;
        }
        inner.records.extend_from_slice(records);
        Ok(records.len())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<HistoryRecord> {
        self.inner.lock().records.clone()
    }

    pub fn for_entity(&self, id: &EntityId) -> Vec<HistoryRecord> {
        self.inner
            .lock()
            .records
            .iter()
            .filter(|r| &r.entity_id == id)
            .cloned()
            .collect()
    }
}

/// Records that a processor rejected, with the reason.
#[derive(Default)]
pub struct DeadLetter {
    path: Option<PathBuf>,
    entries: Mutex<Vec<Value>>,
}

impl std::fmt::Debug for DeadLetter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeadLetter").field("path", &self.path).finish()
    }
}

impl DeadLetter {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        DeadLetter {
            path: Some(path.into()),
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn record(&self, processor: &str, record: &FlowRecord, error: &FlowError, at: Timestamp) {
        let entry = json!({
            "record": record.to_json(),
            "error": error.to_string(),
            "processor": processor,
            "at": at,
        });
        tracing::warn!(processor, error = %error, "record dead-lettered");
        let mut entries = self.entries.lock();
        if let Some(p) = &self.path {
            let line = format!("{entry}\n");
            let res = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .and_then(|mut f| f.write_all(line.as_bytes()));
            if let Err(e) = res {
                tracing::error!(path = %p.display(), error = %e, "cannot write dead letter");
            }
        }
        entries.push(entry);
    }

    pub fn entries(&self) -> Vec<Value> {
        self.entries.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
