//! The integrated data repository: a persistent store of blobs, metadata
//! records, and promotable virtual proxies, with an attribute index for
//! local query execution.
//!
//! Persistence is an append-only journal of metadata mutations plus a
//! content-addressed blob directory; the in-memory state (entries, child
//! adjacency, index) is rebuilt from the journal at startup.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::journal::{JournalRecord, SharedJournal};
use crate::model::{
    covers, now_millis, AttrValue, EntryPath, GranularitySchema, MetadataRecord, PredicateOp,
    ReplicaSet, UserQuery, VirtualProxy,
};

mod blobs;

pub use blobs::BlobStore;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryKey {
    pub source_id: String,
    pub path: EntryPath,
}

impl EntryKey {
    pub fn new(source_id: impl Into<String>, path: EntryPath) -> Self {
        Self { source_id: source_id.into(), path }
    }
}

/// One repository entry: either an id-only placeholder or the full record.
/// Exactly one variant exists per (source, path) at any moment.
#[derive(Debug, Clone, PartialEq)]
pub enum RepoEntry {
    Proxy(VirtualProxy),
    Full(MetadataRecord),
}

impl RepoEntry {
    pub fn is_full(&self) -> bool {
        matches!(self, RepoEntry::Full(_))
    }

    pub fn record(&self) -> Option<&MetadataRecord> {
        match self {
            RepoEntry::Full(r) => Some(r),
            RepoEntry::Proxy(_) => None,
        }
    }
}

/// Ordered literal -> set of entry paths holding it, per attribute.
type AttrIndex = HashMap<String, BTreeMap<AttrValue, BTreeSet<EntryPath>>>;

/// Per (source, level) map from attribute name to an ordered literal map to
/// the set of paths holding that literal. Contains exactly the Full entries'
/// attributes; proxies are unindexed.
#[derive(Debug, Default, PartialEq)]
pub struct MetadataIndex {
    map: HashMap<(String, String), AttrIndex>,
}

impl MetadataIndex {
    fn insert(&mut self, source_id: &str, level: &str, record: &MetadataRecord) {
        let per_level = self.map.entry((source_id.to_string(), level.to_string())).or_default();
        for (attr, value) in &record.attributes {
            per_level
                .entry(attr.clone())
                .or_default()
                .entry(value.clone())
                .or_default()
                .insert(record.path.clone());
        }
    }

    fn remove(&mut self, source_id: &str, level: &str, record: &MetadataRecord) {
        let Some(per_level) = self.map.get_mut(&(source_id.to_string(), level.to_string())) else {
            return;
        };
        for (attr, value) in &record.attributes {
            if let Some(by_value) = per_level.get_mut(attr) {
                if let Some(paths) = by_value.get_mut(value) {
                    paths.remove(&record.path);
                    if paths.is_empty() {
                        by_value.remove(value);
                    }
                }
                if by_value.is_empty() {
                    per_level.remove(attr);
                }
            }
        }
        if per_level.is_empty() {
            self.map.remove(&(source_id.to_string(), level.to_string()));
        }
    }

    /// Paths at (source, level) whose `attr` equals `value` exactly.
    pub fn lookup_eq(
        &self,
        source_id: &str,
        level: &str,
        attr: &str,
        value: &AttrValue,
    ) -> Option<&BTreeSet<EntryPath>> {
        self.map
            .get(&(source_id.to_string(), level.to_string()))?
            .get(attr)?
            .get(value)
    }
}

/// Result of a repository-local query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub rows: Vec<QueryRow>,
    /// False means the caller must treat `rows` as partial: some covered
    /// entry at or above the target level is still an unpromoted proxy (or
    /// was never mirrored).
    pub complete: bool,
    pub blob_refs_resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub source_id: String,
    pub record: MetadataRecord,
}

pub struct Repository {
    schemas: HashMap<String, GranularitySchema>,
    entries: HashMap<EntryKey, RepoEntry>,
    children: HashMap<EntryKey, BTreeSet<String>>,
    index: MetadataIndex,
    blobs: BlobStore,
    journal: SharedJournal,
}

impl Repository {
    /// Creates an empty repository over `dir/blobs`, bound to a shared
    /// journal. Journal replay is driven by the owning engine via
    /// [`Repository::apply`].
    pub fn open(dir: &Path, journal: SharedJournal) -> Result<Self> {
        Ok(Self {
            schemas: HashMap::new(),
            entries: HashMap::new(),
            children: HashMap::new(),
            index: MetadataIndex::default(),
            blobs: BlobStore::open(dir.join("blobs"))?,
            journal,
        })
    }

    pub fn register_schema(&mut self, source_id: impl Into<String>, schema: GranularitySchema) {
        self.schemas.insert(source_id.into(), schema);
    }

    pub fn schema(&self, source_id: &str) -> Option<&GranularitySchema> {
        self.schemas.get(source_id)
    }

    fn journal_append(&self, record: &JournalRecord) -> Result<()> {
        self.journal.lock().expect("journal lock").append(record)
    }

    /// Replays one journal record into in-memory state (no re-journaling).
    pub fn apply(&mut self, record: &JournalRecord) {
        match record {
            JournalRecord::PutProxy { source_id, path, discovered_at } => {
                self.apply_put_proxy(source_id, path.clone(), *discovered_at);
            }
            JournalRecord::Promote { source_id, record } => {
                self.apply_promote(source_id, record.clone());
            }
            JournalRecord::RemoveEntry { source_id, path } => {
                self.apply_remove(&EntryKey::new(source_id.clone(), path.clone()));
            }
            _ => {}
        }
    }

    fn link_child(&mut self, key: &EntryKey) {
        if let Some(parent) = key.path.parent() {
            let id = key.path.last_id().expect("non-root").to_string();
            self.children.entry(EntryKey::new(key.source_id.clone(), parent)).or_default().insert(id);
        }
    }

    fn unlink_child(&mut self, key: &EntryKey) {
        if let Some(parent) = key.path.parent() {
            let parent_key = EntryKey::new(key.source_id.clone(), parent);
            if let Some(set) = self.children.get_mut(&parent_key) {
                set.remove(key.path.last_id().expect("non-root"));
                if set.is_empty() {
                    self.children.remove(&parent_key);
                }
            }
        }
    }

    fn apply_put_proxy(&mut self, source_id: &str, path: EntryPath, discovered_at: i64) -> bool {
        let key = EntryKey::new(source_id.to_string(), path.clone());
        if self.entries.contains_key(&key) {
            return false;
        }
        self.entries.insert(key.clone(), RepoEntry::Proxy(VirtualProxy { path, discovered_at }));
        self.link_child(&key);
        true
    }

    fn apply_promote(&mut self, source_id: &str, record: MetadataRecord) {
        let key = EntryKey::new(source_id.to_string(), record.path.clone());
        let level = record.path.last_level().expect("non-root record").to_string();
        if let Some(RepoEntry::Full(old)) = self.entries.get(&key) {
            let old = old.clone();
            self.index.remove(source_id, &level, &old);
        }
        self.index.insert(source_id, &level, &record);
        self.entries.insert(key.clone(), RepoEntry::Full(record));
        self.link_child(&key);
    }

    fn apply_remove(&mut self, key: &EntryKey) {
        if let Some(RepoEntry::Full(record)) = self.entries.get(key) {
            let record = record.clone();
            let level = record.path.last_level().expect("non-root record").to_string();
            self.index.remove(&key.source_id, &level, &record);
        }
        self.entries.remove(key);
        self.children.remove(key);
        self.unlink_child(key);
    }

    /// Stores an id-only placeholder unless any entry already exists for the
    /// path (an existing Full record wins). Returns whether state changed.
    pub fn put_proxy(&mut self, source_id: &str, path: EntryPath) -> Result<bool> {
        let discovered_at = now_millis();
        let key = EntryKey::new(source_id.to_string(), path.clone());
        if self.entries.contains_key(&key) {
            return Ok(false);
        }
        self.journal_append(&JournalRecord::PutProxy {
            source_id: source_id.to_string(),
            path: path.clone(),
            discovered_at,
        })?;
        Ok(self.apply_put_proxy(source_id, path, discovered_at))
    }

    /// Replaces a proxy (or nothing, or an older record) with the full
    /// record. Concurrent promotes of one path converge last-writer-wins by
    /// `last_modified`, ties broken toward the lexicographically greater
    /// content hash, then toward the record carrying a blob reference (so
    /// blob enrichment of an otherwise identical record sticks). Returns
    /// whether state changed.
    pub fn promote(&mut self, source_id: &str, record: MetadataRecord) -> Result<bool> {
        record.validate().map_err(|e| Error::InvalidRecord(e.to_string()))?;
        let key = EntryKey::new(source_id.to_string(), record.path.clone());
        if let Some(RepoEntry::Full(existing)) = self.entries.get(&key) {
            let incoming = (record.last_modified, record.content_hash(), record.blob_ref.clone());
            let current =
                (existing.last_modified, existing.content_hash(), existing.blob_ref.clone());
            if incoming <= current {
                return Ok(false);
            }
        }
        self.journal_append(&JournalRecord::Promote {
            source_id: source_id.to_string(),
            record: record.clone(),
        })?;
        self.apply_promote(source_id, record);
        Ok(true)
    }

    /// Promotion that bypasses the last-writer-wins comparison. Used by
    /// refresh after verifying against the source of truth (e.g. a local
    /// record whose content disagrees with an equal-timestamp source copy).
    pub fn promote_forced(&mut self, source_id: &str, record: MetadataRecord) -> Result<()> {
        record.validate().map_err(|e| Error::InvalidRecord(e.to_string()))?;
        self.journal_append(&JournalRecord::Promote {
            source_id: source_id.to_string(),
            record: record.clone(),
        })?;
        self.apply_promote(source_id, record);
        Ok(())
    }

    pub fn put_blob(&mut self, data: &[u8]) -> Result<String> {
        self.blobs.put(data)
    }

    pub fn get_blob(&self, hash: &str) -> Result<Vec<u8>> {
        self.blobs.get(hash)
    }

    pub fn has_blob(&self, hash: &str) -> bool {
        self.blobs.has(hash)
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn get(&self, source_id: &str, path: &EntryPath) -> Option<&RepoEntry> {
        self.entries.get(&EntryKey::new(source_id.to_string(), path.clone()))
    }

    /// Mirrored child ids of a container, if any are known locally.
    pub fn children_of(&self, source_id: &str, path: &EntryPath) -> Option<&BTreeSet<String>> {
        self.children.get(&EntryKey::new(source_id.to_string(), path.clone()))
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn full_count(&self) -> usize {
        self.entries.values().filter(|e| e.is_full()).count()
    }

    pub fn proxy_count(&self) -> usize {
        self.entries.len() - self.full_count()
    }

    pub fn index(&self) -> &MetadataIndex {
        &self.index
    }

    /// Full records covered by a (source, prefix) pointer.
    pub fn full_records_under<'a>(
        &'a self,
        source_id: &'a str,
        prefix: &'a EntryPath,
    ) -> impl Iterator<Item = &'a MetadataRecord> + 'a {
        self.entries.iter().filter_map(move |(key, entry)| {
            if key.source_id == source_id && prefix.is_prefix_of(&key.path) {
                entry.record()
            } else {
                None
            }
        })
    }

    /// Outcome of a query with no predicate part (a NULL user query): rows
    /// are empty and completeness reflects proxy coverage only, i.e. whether
    /// every pointed subtree has been mirrored at least as proxies.
    pub fn null_query_outcome(&self, scope: &ReplicaSet) -> QueryOutcome {
        let complete = scope.replicas.iter().all(|vr| {
            self.entries.contains_key(&EntryKey::new(vr.source_id.clone(), vr.path.clone()))
        });
        QueryOutcome { rows: Vec::new(), complete, blob_refs_resolved: true }
    }

    /// Runs a query against local state only, scoped to a normalized
    /// replicaset.
    ///
    /// `complete` is accounted structurally: it is true iff for every
    /// covered subtree the mirrored chain from the pointer down to the
    /// target level consists solely of Full records (the depth-0 root
    /// marker, which carries no metadata, is exempt). Rows may be non-empty
    /// while `complete` is false.
    pub fn query(&self, query: &UserQuery, scope: &ReplicaSet) -> Result<QueryOutcome> {
        // Resolve the target depth for every scoped source up front.
        let mut target_depths: HashMap<&str, usize> = HashMap::new();
        for vr in &scope.replicas {
            let schema = self.schemas.get(&vr.source_id).ok_or_else(|| {
                Error::InvalidQuery(format!("source {:?} not registered", vr.source_id))
            })?;
            let depth = query.target_depth(schema)?;
            target_depths.insert(vr.source_id.as_str(), depth);
        }

        let mut rows: BTreeMap<EntryKey, MetadataRecord> = BTreeMap::new();
        let mut add_candidate = |key: &EntryKey, record: &MetadataRecord| {
            if covers(scope, &key.source_id, &key.path) && query.matches(&record.attributes) {
                rows.insert(key.clone(), record.clone());
            }
        };

        // An equality predicate can be answered from the metadata index;
        // otherwise scan Full entries at the target depth.
        let eq_pred = query.predicates.iter().find(|p| p.op == PredicateOp::Eq);
        if let Some(pred) = eq_pred {
            for (source_id, &depth) in &target_depths {
                let schema = &self.schemas[*source_id];
                let Some(level) = schema.level_at(depth) else { continue };
                let Some(paths) = self.index.lookup_eq(source_id, level, &pred.attribute, &pred.value)
                else {
                    continue;
                };
                for path in paths {
                    let key = EntryKey::new(source_id.to_string(), path.clone());
                    if let Some(RepoEntry::Full(record)) = self.entries.get(&key) {
                        add_candidate(&key, record);
                    }
                }
            }
        } else {
            for (key, entry) in &self.entries {
                let Some(&depth) = target_depths.get(key.source_id.as_str()) else { continue };
                if key.path.depth() != depth {
                    continue;
                }
                if let RepoEntry::Full(record) = entry {
                    add_candidate(key, record);
                }
            }
        }

        let complete = scope
            .replicas
            .iter()
            .all(|vr| self.subtree_complete(&vr.source_id, &vr.path, target_depths[vr.source_id.as_str()]));

        let mut blob_refs_resolved = true;
        if query.include_binary {
            for key in rows.keys() {
                if !self.leaf_blobs_resolved(key) {
                    blob_refs_resolved = false;
                    break;
                }
            }
        }

        let rows = rows
            .into_iter()
            .map(|(key, record)| QueryRow { source_id: key.source_id, record })
            .collect();
        Ok(QueryOutcome { rows, complete, blob_refs_resolved })
    }

    /// Structural completeness of one pointed subtree down to `target_depth`:
    /// the anchor must be mirrored and every mirrored node at depths 1..=
    /// target_depth must be Full.
    fn subtree_complete(&self, source_id: &str, anchor: &EntryPath, target_depth: usize) -> bool {
        if anchor.depth() > target_depth {
            return true;
        }
        let anchor_key = EntryKey::new(source_id.to_string(), anchor.clone());
        if !self.entries.contains_key(&anchor_key) {
            return false;
        }
        let Some(schema) = self.schemas.get(source_id) else {
            return false;
        };
        let mut stack = vec![anchor.clone()];
        while let Some(path) = stack.pop() {
            if path.depth() >= 1 {
                match self.entries.get(&EntryKey::new(source_id.to_string(), path.clone())) {
                    Some(RepoEntry::Full(_)) => {}
                    _ => return false,
                }
            }
            if path.depth() < target_depth {
                let Some(level) = schema.level_at(path.depth() + 1) else { continue };
                let key = EntryKey::new(source_id.to_string(), path.clone());
                if let Some(ids) = self.children.get(&key) {
                    for id in ids {
                        if let Ok(child) = path.child(level, id) {
                            stack.push(child);
                        }
                    }
                }
            }
        }
        true
    }

    /// True iff every mirrored leaf under `key` is a Full record whose blob
    /// is present in the store.
    fn leaf_blobs_resolved(&self, key: &EntryKey) -> bool {
        let Some(schema) = self.schemas.get(&key.source_id) else {
            return false;
        };
        let leaf_depth = schema.max_depth();
        let mut stack = vec![key.path.clone()];
        while let Some(path) = stack.pop() {
            if path.depth() == leaf_depth {
                let entry = self.entries.get(&EntryKey::new(key.source_id.clone(), path.clone()));
                match entry {
                    Some(RepoEntry::Full(record)) => match &record.blob_ref {
                        Some(hash) if self.blobs.has(hash) => {}
                        _ => return false,
                    },
                    _ => return false,
                }
                continue;
            }
            let Some(level) = schema.level_at(path.depth() + 1) else { continue };
            let parent_key = EntryKey::new(key.source_id.clone(), path.clone());
            if let Some(ids) = self.children.get(&parent_key) {
                for id in ids {
                    if let Ok(child) = path.child(level, id) {
                        stack.push(child);
                    }
                }
            }
        }
        true
    }

    /// Removes every entry covered by no referenced prefix, plus blobs that
    /// no surviving record references. Returns the number of entries
    /// removed. Referenced data is never touched.
    pub fn gc_orphans(&mut self, referenced: &[(String, EntryPath)]) -> Result<usize> {
        let doomed: Vec<EntryKey> = self
            .entries
            .keys()
            .filter(|key| {
                !referenced
                    .iter()
                    .any(|(src, prefix)| *src == key.source_id && prefix.is_prefix_of(&key.path))
            })
            .cloned()
            .collect();
        for key in &doomed {
            self.journal_append(&JournalRecord::RemoveEntry {
                source_id: key.source_id.clone(),
                path: key.path.clone(),
            })?;
            self.apply_remove(key);
        }

        let alive: BTreeSet<String> = self
            .entries
            .values()
            .filter_map(|e| e.record().and_then(|r| r.blob_ref.clone()))
            .collect();
        for hash in self.blobs.list()? {
            if !alive.contains(&hash) {
                self.blobs.remove(&hash)?;
            }
        }
        Ok(doomed.len())
    }

    /// Test support: structural equality of replayed vs. live state.
    pub fn state_eq(&self, other: &Repository) -> bool {
        self.entries == other.entries && self.children == other.children && self.index == other.index
    }
}
