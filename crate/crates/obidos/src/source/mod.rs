//! Pluggable data-source connectors with exact request/byte accounting.
//!
//! A connector exposes enumeration, metadata fetch, and blob fetch against
//! one hierarchical source. Connectors are stateless aside from their
//! transfer meter, which tolerates concurrent increments. Every operation
//! charges the meter; there is no hidden traffic.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EntryPath, GranularitySchema, MetadataRecord, UserQuery};

mod fs;
mod generate;
mod remote;

pub use fs::FsConnector;
pub use generate::{generate_synthetic_source, GeneratorParams, MetadataProfile};
pub use remote::SimulatedRemote;

/// Registration info for one source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub source_id: String,
    pub schema: GranularitySchema,
    pub root_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access: Option<String>,
}

/// Snapshot of a source's traffic counters. All counters are monotonically
/// non-decreasing within a run; per-operation deltas are obtained by
/// subtracting snapshots.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferStats {
    pub listing_requests: u64,
    pub metadata_requests: u64,
    pub metadata_bytes: u64,
    pub blob_requests: u64,
    pub blob_bytes: u64,
}

impl TransferStats {
    pub fn total_requests(&self) -> u64 {
        self.listing_requests + self.metadata_requests + self.blob_requests
    }

    pub fn total_bytes(&self) -> u64 {
        self.metadata_bytes + self.blob_bytes
    }

    pub fn is_zero(&self) -> bool {
        *self == TransferStats::default()
    }

    pub fn delta_since(&self, earlier: &TransferStats) -> TransferStats {
        TransferStats {
            listing_requests: self.listing_requests - earlier.listing_requests,
            metadata_requests: self.metadata_requests - earlier.metadata_requests,
            metadata_bytes: self.metadata_bytes - earlier.metadata_bytes,
            blob_requests: self.blob_requests - earlier.blob_requests,
            blob_bytes: self.blob_bytes - earlier.blob_bytes,
        }
    }

    pub fn add(&mut self, other: &TransferStats) {
        self.listing_requests += other.listing_requests;
        self.metadata_requests += other.metadata_requests;
        self.metadata_bytes += other.metadata_bytes;
        self.blob_requests += other.blob_requests;
        self.blob_bytes += other.blob_bytes;
    }
}

/// Shared atomic traffic meter owned by a connector.
#[derive(Debug, Default, Clone)]
pub struct Meter {
    inner: Arc<MeterInner>,
}

#[derive(Debug, Default)]
struct MeterInner {
    listing_requests: AtomicU64,
    metadata_requests: AtomicU64,
    metadata_bytes: AtomicU64,
    blob_requests: AtomicU64,
    blob_bytes: AtomicU64,
}

impl Meter {
    pub fn charge_listing(&self) {
        self.inner.listing_requests.fetch_add(1, Ordering::Relaxed);
    }

    pub fn charge_metadata(&self, bytes: u64) {
        self.inner.metadata_requests.fetch_add(1, Ordering::Relaxed);
        self.inner.metadata_bytes.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn charge_blob(&self, bytes: u64) {
        self.inner.blob_requests.fetch_add(1, Ordering::Relaxed);
        self.inner.blob_bytes.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> TransferStats {
        TransferStats {
            listing_requests: self.inner.listing_requests.load(Ordering::Relaxed),
            metadata_requests: self.inner.metadata_requests.load(Ordering::Relaxed),
            metadata_bytes: self.inner.metadata_bytes.load(Ordering::Relaxed),
            blob_requests: self.inner.blob_requests.load(Ordering::Relaxed),
            blob_bytes: self.inner.blob_bytes.load(Ordering::Relaxed),
        }
    }
}

/// Simulated network characteristics for a remote-wrapped connector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemoteProfile {
    pub per_request_millis: u64,
    pub per_byte_nanos: f64,
}

impl RemoteProfile {
    pub fn new(per_request_millis: u64, per_byte_nanos: f64) -> Result<Self> {
        if per_byte_nanos < 0.0 {
            return Err(Error::Config("per_byte_nanos must be >= 0".into()));
        }
        Ok(Self { per_request_millis, per_byte_nanos })
    }
}

impl Default for RemoteProfile {
    fn default() -> Self {
        Self { per_request_millis: 20, per_byte_nanos: 10.0 }
    }
}

/// One hierarchical data source.
pub trait Connector: Send + Sync {
    fn source_id(&self) -> &str;

    fn schema(&self) -> &GranularitySchema;

    /// Child ids of a container, in stable sorted order. At depth n the
    /// children are leaf payload ids. Charges one listing request.
    fn list_children(&self, path: &EntryPath) -> Result<Vec<String>>;

    /// Full metadata record for an entry (containers and leaves). Charges
    /// one metadata request plus the record's sidecar byte length.
    fn fetch_metadata(&self, path: &EntryPath) -> Result<MetadataRecord>;

    /// Leaf payload bytes plus their content hash. Charges one blob request
    /// plus the payload length.
    fn fetch_blob(&self, path: &EntryPath) -> Result<(Vec<u8>, String)>;

    /// Current traffic counters for this source.
    fn stats(&self) -> TransferStats;
}

/// Enumerates every path in the subtree under `scope` (inclusive of the
/// scope node itself when it is not the root), breadth-first, down to
/// `max_depth`. Charges one listing per traversed internal node.
pub fn enumerate_subtree(
    conn: &dyn Connector,
    scope: &EntryPath,
    max_depth: usize,
) -> Result<Vec<EntryPath>> {
    let schema = conn.schema();
    schema.validate_path(scope)?;
    let mut out = Vec::new();
    if !scope.is_root() {
        out.push(scope.clone());
    }
    let mut queue = VecDeque::new();
    queue.push_back(scope.clone());
    while let Some(node) = queue.pop_front() {
        if node.depth() >= max_depth || node.depth() >= schema.max_depth() {
            continue;
        }
        let level = schema.level_at(node.depth() + 1).expect("bounded by max_depth");
        for id in conn.list_children(&node)? {
            let child = node.child(level, id)?;
            out.push(child.clone());
            queue.push_back(child);
        }
    }
    Ok(out)
}

/// Executes a conjunctive query against the source, scoped to one subtree.
///
/// Cost model: one listing per traversed internal node plus one metadata
/// request per candidate examined at the target level. Entries missing a
/// predicate attribute never satisfy the query.
pub fn source_query(conn: &dyn Connector, scope: &EntryPath, query: &UserQuery) -> Result<Vec<EntryPath>> {
    let schema = conn.schema();
    let target_depth = query.target_depth(schema)?;
    if scope.depth() > target_depth {
        return Ok(Vec::new());
    }
    let subtree = enumerate_subtree(conn, scope, target_depth)?;
    let mut hits = Vec::new();
    for candidate in subtree.into_iter().filter(|p| p.depth() == target_depth) {
        let record = conn.fetch_metadata(&candidate)?;
        if query.matches(&record.attributes) {
            hits.push(candidate);
        }
    }
    hits.sort();
    Ok(hits)
}
