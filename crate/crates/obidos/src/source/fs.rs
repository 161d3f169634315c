//! Filesystem connector for sources laid out by the synthetic generator (or
//! by hand, following the same layout).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{Connector, Meter, TransferStats};
use crate::error::{Error, Result};
use crate::model::{AttrValue, EntryPath, GranularitySchema, MetadataRecord};

#[derive(Deserialize)]
struct SourceToml {
    source_id: String,
    levels: Vec<String>,
    leaf_level: String,
}

#[derive(Deserialize)]
struct Sidecar {
    attributes: serde_json::Map<String, serde_json::Value>,
    last_modified: i64,
}

pub struct FsConnector {
    source_id: String,
    schema: GranularitySchema,
    root: PathBuf,
    meter: Meter,
}

impl FsConnector {
    /// Opens a source directory, reading its `source.toml` descriptor.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let descriptor_path = root.join("source.toml");
        let text = fs::read_to_string(&descriptor_path).map_err(|e| {
            Error::SourceUnavailable(format!("{}: {e}", descriptor_path.display()))
        })?;
        let descriptor: SourceToml =
            toml::from_str(&text).map_err(|e| Error::Config(format!("source.toml: {e}")))?;
        let schema = GranularitySchema::new(descriptor.levels, descriptor.leaf_level)?;
        Ok(Self { source_id: descriptor.source_id, schema, root, meter: Meter::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn container_dir(&self, path: &EntryPath) -> PathBuf {
        let mut dir = self.root.clone();
        for seg in path.segments() {
            dir.push(&seg.id);
        }
        dir
    }

    fn check_available(&self) -> Result<()> {
        if !self.root.is_dir() {
            return Err(Error::SourceUnavailable(format!(
                "source root {} missing",
                self.root.display()
            )));
        }
        Ok(())
    }

    fn parse_sidecar(&self, path: &EntryPath, bytes: &[u8]) -> Result<MetadataRecord> {
        let sidecar: Sidecar = serde_json::from_slice(bytes)
            .map_err(|e| Error::InvalidRecord(format!("{path}: bad sidecar: {e}")))?;
        let mut attributes = BTreeMap::new();
        for (name, value) in &sidecar.attributes {
            attributes.insert(name.clone(), AttrValue::from_plain_json(value)?);
        }
        let record = MetadataRecord {
            path: path.clone(),
            attributes,
            last_modified: sidecar.last_modified,
            size_bytes: bytes.len() as u64,
            blob_ref: None,
        };
        record.validate()?;
        Ok(record)
    }
}

impl Connector for FsConnector {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn schema(&self) -> &GranularitySchema {
        &self.schema
    }

    fn list_children(&self, path: &EntryPath) -> Result<Vec<String>> {
        self.check_available()?;
        self.schema.validate_path(path)?;
        if path.depth() > self.schema.n() {
            return Err(Error::InvalidPath(format!("{path}: leaf payloads have no children")));
        }
        let dir = self.container_dir(path);
        if !dir.is_dir() {
            return Err(Error::PathNotFound(path.to_string()));
        }
        let mut ids = Vec::new();
        if path.depth() == self.schema.n() {
            // Deepest container: children are leaf payload ids.
            for entry in fs::read_dir(&dir)? {
                let name = entry?.file_name().to_string_lossy().to_string();
                if let Some(id) = name.strip_suffix(".blob") {
                    ids.push(id.to_string());
                }
            }
        } else {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                if entry.path().is_dir() {
                    ids.push(entry.file_name().to_string_lossy().to_string());
                }
            }
        }
        ids.sort();
        self.meter.charge_listing();
        Ok(ids)
    }

    fn fetch_metadata(&self, path: &EntryPath) -> Result<MetadataRecord> {
        self.check_available()?;
        self.schema.validate_path(path)?;
        if path.is_root() {
            return Err(Error::InvalidPath("source root has no metadata record".into()));
        }
        let sidecar_path = if path.depth() == self.schema.max_depth() {
            let id = path.last_id().expect("non-root");
            self.container_dir(&path.parent().expect("non-root")).join(format!("{id}.meta"))
        } else {
            self.container_dir(path).join("meta.json")
        };
        let bytes =
            fs::read(&sidecar_path).map_err(|_| Error::PathNotFound(path.to_string()))?;
        let record = self.parse_sidecar(path, &bytes)?;
        self.meter.charge_metadata(record.size_bytes);
        Ok(record)
    }

    fn fetch_blob(&self, path: &EntryPath) -> Result<(Vec<u8>, String)> {
        self.check_available()?;
        self.schema.validate_path(path)?;
        if path.depth() != self.schema.max_depth() {
            return Err(Error::InvalidPath(format!("{path}: only leaf payloads have blobs")));
        }
        let id = path.last_id().expect("non-root");
        let blob_path =
            self.container_dir(&path.parent().expect("non-root")).join(format!("{id}.blob"));
        let bytes = fs::read(&blob_path).map_err(|_| Error::PathNotFound(path.to_string()))?;
        let hash = hex::encode(Sha256::digest(&bytes));
        self.meter.charge_blob(bytes.len() as u64);
        Ok((bytes, hash))
    }

    fn stats(&self) -> TransferStats {
        self.meter.snapshot()
    }
}
