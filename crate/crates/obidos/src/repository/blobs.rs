//! Content-addressed blob store: `blobs/<2-hex>/<sha256-hex>`.
//!
//! Content addressing deduplicates naturally; the two-character prefix
//! directory keeps per-directory entry counts down. Reads re-verify the
//! digest, so a corrupted file surfaces as [`Error::BlobNotFound`] instead
//! of silently returning bad bytes.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn hash_of(data: &[u8]) -> String {
        hex::encode(Sha256::digest(data))
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join(&hash[..2.min(hash.len())]).join(hash)
    }

    fn valid_hash(hash: &str) -> bool {
        hash.len() == 64 && hash.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
    }

    /// Stores bytes, returning their content hash. Same bytes store once.
    pub fn put(&self, data: &[u8]) -> Result<String> {
        let hash = Self::hash_of(data);
        let path = self.blob_path(&hash);
        if path.exists() {
            return Ok(hash);
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, data)?;
        fs::rename(&tmp, &path)?;
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        if !Self::valid_hash(hash) {
            return Err(Error::BlobNotFound(format!("invalid hash {hash:?}")));
        }
        let path = self.blob_path(hash);
        let data = fs::read(&path).map_err(|_| Error::BlobNotFound(hash.to_string()))?;
        if Self::hash_of(&data) != hash {
            return Err(Error::BlobNotFound(format!("{hash}: integrity verification failed")));
        }
        Ok(data)
    }

    pub fn has(&self, hash: &str) -> bool {
        Self::valid_hash(hash) && self.blob_path(hash).exists()
    }

    pub fn remove(&self, hash: &str) -> Result<bool> {
        if !self.has(hash) {
            return Ok(false);
        }
        fs::remove_file(self.blob_path(hash))?;
        Ok(true)
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut hashes = Vec::new();
        for prefix in fs::read_dir(&self.root)? {
            let prefix = prefix?.path();
            if !prefix.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&prefix)? {
                let name = entry?.file_name().to_string_lossy().to_string();
                if Self::valid_hash(&name) {
                    hashes.push(name);
                }
            }
        }
        hashes.sort();
        Ok(hashes)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
