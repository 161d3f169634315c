//! Wrapper that simulates remote access latency over any connector.
//!
//! The wrapper delays each operation by a per-request latency plus a
//! per-byte latency on the payload moved, and changes nothing else: results
//! and accounting are those of the wrapped connector.

use std::time::Duration;

use super::{Connector, RemoteProfile, TransferStats};
use crate::error::Result;
use crate::model::{EntryPath, GranularitySchema, MetadataRecord};

pub struct SimulatedRemote<C> {
    inner: C,
    profile: RemoteProfile,
}

impl<C: Connector> SimulatedRemote<C> {
    pub fn new(inner: C, profile: RemoteProfile) -> Self {
        Self { inner, profile }
    }

    fn delay(&self, payload_bytes: u64) {
        let nanos = (payload_bytes as f64 * self.profile.per_byte_nanos) as u64;
        std::thread::sleep(
            Duration::from_millis(self.profile.per_request_millis) + Duration::from_nanos(nanos),
        );
    }
}

impl<C: Connector> Connector for SimulatedRemote<C> {
    fn source_id(&self) -> &str {
        self.inner.source_id()
    }

    fn schema(&self) -> &GranularitySchema {
        self.inner.schema()
    }

    fn list_children(&self, path: &EntryPath) -> Result<Vec<String>> {
        let out = self.inner.list_children(path)?;
        self.delay(0);
        Ok(out)
    }

    fn fetch_metadata(&self, path: &EntryPath) -> Result<MetadataRecord> {
        let out = self.inner.fetch_metadata(path)?;
        self.delay(out.size_bytes);
        Ok(out)
    }

    fn fetch_blob(&self, path: &EntryPath) -> Result<(Vec<u8>, String)> {
        let out = self.inner.fetch_blob(path)?;
        self.delay(out.0.len() as u64);
        Ok(out)
    }

    fn stats(&self) -> TransferStats {
        self.inner.stats()
    }
}
