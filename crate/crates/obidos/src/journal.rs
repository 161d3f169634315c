//! Append-only journal of instance state mutations.
//!
//! One journal file records metadata-store mutations together with
//! tag-discriminated records for the replicaset holder and sharing state, so
//! a restart rebuilds the whole instance by replay. Frames are
//! `[u32 little-endian length][canonical JSON payload]`; this framing is the
//! only on-disk format that must stay bit-stable across versions. A torn
//! trailing frame (crash mid-append) is dropped and truncated on reopen.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{to_canonical_json, EntryPath, MetadataRecord, ReplicaSet, ReplicaSetId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadMarker {
    Proxy,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum JournalRecord {
    PutProxy {
        source_id: String,
        path: EntryPath,
        discovered_at: i64,
    },
    Promote {
        source_id: String,
        record: MetadataRecord,
    },
    RemoveEntry {
        source_id: String,
        path: EntryPath,
    },
    HolderRegister {
        user_id: String,
        replicaset: ReplicaSet,
    },
    HolderUpdate {
        replicaset: ReplicaSet,
    },
    HolderUnregister {
        user_id: String,
        replicaset_id: ReplicaSetId,
    },
    HolderPut {
        source_id: String,
        path: EntryPath,
        marker: LoadMarker,
    },
    HolderLoaded {
        replicaset_id: ReplicaSetId,
        at: i64,
    },
    ShareExport {
        replicaset_id: ReplicaSetId,
    },
    GrantIssue {
        api_key: String,
        replicaset_ids: Vec<ReplicaSetId>,
        expiry: i64,
    },
    GrantRevoke {
        api_key: String,
    },
    BindingAdd {
        replicaset_id: ReplicaSetId,
        sender_uri: String,
        api_key: String,
        expiry: i64,
        receiver_user: String,
    },
}

pub type SharedJournal = Arc<Mutex<Journal>>;

pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (or creates) a journal, returning the replayable records and a
    /// handle positioned for appending. Truncates a torn trailing frame.
    pub fn open(path: impl Into<PathBuf>) -> Result<(SharedJournal, Vec<JournalRecord>)> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        // No truncate here: existing records are the state being replayed.
        let mut file =
            OpenOptions::new().create(true).truncate(false).read(true).write(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let mut records = Vec::new();
        let mut offset = 0usize;
        let mut good = 0usize;
        while offset + 4 <= bytes.len() {
            let len = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
            if offset + 4 + len > bytes.len() {
                break; // torn tail
            }
            let payload = &bytes[offset + 4..offset + 4 + len];
            let record: JournalRecord = serde_json::from_slice(payload).map_err(|e| {
                Error::Deserialize {
                    offset: offset + 4,
                    message: format!("corrupt journal record: {e}"),
                }
            })?;
            records.push(record);
            offset += 4 + len;
            good = offset;
        }
        if good < bytes.len() {
            file.set_len(good as u64)?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((Arc::new(Mutex::new(Journal { path, file })), records))
    }

    pub fn append(&mut self, record: &JournalRecord) -> Result<()> {
        let payload = to_canonical_json(record);
        let len = (payload.len() as u32).to_le_bytes();
        self.file.write_all(&len)?;
        self.file.write_all(&payload)?;
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
