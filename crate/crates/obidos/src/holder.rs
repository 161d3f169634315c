//! The Replicaset Holder: in-memory maps associating users to replicasets to
//! sources to per-level loaded state, answering "was this virtual replica
//! loaded before?" in O(1).
//!
//! Answers use exact-pointer semantics: a hit requires the same source id
//! and path that was put earlier. Subtree reuse is resolved by querying the
//! repository, never inferred here. Mutations are written through to the
//! shared instance journal so a restart preserves every answer.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::journal::{JournalRecord, LoadMarker, SharedJournal};
use crate::model::{
    normalize_replicaset, now_millis, EntryPath, GranularitySchema, ReplicaSet, ReplicaSetId,
    VirtualReplica,
};

/// Per (replicaset, source) granularity maps: one map per container level
/// plus the presence array `A_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityMaps {
    maps: Vec<BTreeMap<EntryPath, LoadMarker>>,
    presence: Vec<bool>,
}

impl GranularityMaps {
    fn new(n: usize) -> Self {
        Self { maps: vec![BTreeMap::new(); n], presence: vec![false; n] }
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn level_map(&self, level_index: usize) -> Option<&BTreeMap<EntryPath, LoadMarker>> {
        self.maps.get(level_index)
    }

    fn mark(&mut self, path: &EntryPath, marker: LoadMarker) {
        let depth = path.depth();
        if depth >= 1 && depth <= self.maps.len() {
            self.maps[depth - 1].insert(path.clone(), marker);
            // A Full marker implies at least Proxy markers on all ancestors.
            for d in 1..depth {
                self.maps[d - 1].entry(path.prefix(d)).or_insert(LoadMarker::Proxy);
            }
        }
    }

    fn refresh_presence(&mut self, implied: bool) {
        for (i, map) in self.maps.iter().enumerate() {
            self.presence[i] = implied || !map.is_empty();
        }
    }
}

#[derive(Debug, Clone)]
struct RsEntry {
    replicaset: ReplicaSet,
    sources: Vec<String>,
    /// Per virtual replica: was it loaded (and how).
    load_status: BTreeMap<VirtualReplica, Option<LoadMarker>>,
}

pub struct Holder {
    user_map: BTreeMap<String, Vec<ReplicaSetId>>,
    rs_map: HashMap<ReplicaSetId, RsEntry>,
    granularity: HashMap<(ReplicaSetId, String), GranularityMaps>,
    /// Global exact-pointer set behind `get`/`put`.
    loaded: HashSet<(String, EntryPath)>,
    schemas: HashMap<String, GranularitySchema>,
    journal: SharedJournal,
}

impl Holder {
    pub fn new(journal: SharedJournal) -> Self {
        Self {
            user_map: BTreeMap::new(),
            rs_map: HashMap::new(),
            granularity: HashMap::new(),
            loaded: HashSet::new(),
            schemas: HashMap::new(),
            journal,
        }
    }

    pub fn register_schema(&mut self, source_id: impl Into<String>, schema: GranularitySchema) {
        self.schemas.insert(source_id.into(), schema);
    }

    fn journal_append(&self, record: &JournalRecord) -> Result<()> {
        self.journal.lock().expect("journal lock").append(record)
    }

    /// Replays one journal record (no re-journaling).
    pub fn apply(&mut self, record: &JournalRecord) {
        match record {
            JournalRecord::HolderRegister { user_id, replicaset } => {
                self.apply_register(user_id, replicaset.clone());
            }
            JournalRecord::HolderUpdate { replicaset } => {
                self.apply_update(replicaset.clone());
            }
            JournalRecord::HolderUnregister { user_id, replicaset_id } => {
                self.apply_unregister(user_id, replicaset_id);
            }
            JournalRecord::HolderPut { source_id, path, marker } => {
                self.apply_put(&VirtualReplica::new(source_id.clone(), path.clone()), *marker);
            }
            JournalRecord::HolderLoaded { replicaset_id, at } => {
                if let Some(entry) = self.rs_map.get_mut(replicaset_id) {
                    entry.replicaset.last_loaded_at = Some(*at);
                }
            }
            _ => {}
        }
    }

    /// True iff a previous put recorded exactly this pointer as loaded, by
    /// any replicaset of any user.
    pub fn get(&self, vr: &VirtualReplica) -> bool {
        self.loaded.contains(&(vr.source_id.clone(), vr.path.clone()))
    }

    /// Records a pointer as loaded and updates the granularity maps of every
    /// replicaset containing it. Idempotent.
    pub fn put(&mut self, vr: &VirtualReplica, marker: LoadMarker) -> Result<()> {
        self.journal_append(&JournalRecord::HolderPut {
            source_id: vr.source_id.clone(),
            path: vr.path.clone(),
            marker,
        })?;
        self.apply_put(vr, marker);
        Ok(())
    }

    fn apply_put(&mut self, vr: &VirtualReplica, marker: LoadMarker) {
        self.loaded.insert((vr.source_id.clone(), vr.path.clone()));
        let holding: Vec<ReplicaSetId> = self
            .rs_map
            .iter()
            .filter(|(_, entry)| entry.replicaset.replicas.contains(vr))
            .map(|(id, _)| *id)
            .collect();
        for id in holding {
            let entry = self.rs_map.get_mut(&id).expect("just listed");
            entry.load_status.insert(vr.clone(), Some(marker));
            let implied = true; // any replica for the source implies all levels
            if let Some(maps) = self.granularity.get_mut(&(id, vr.source_id.clone())) {
                maps.mark(&vr.path, marker);
                maps.refresh_presence(implied);
            }
        }
    }

    pub fn register(&mut self, user_id: &str, rs: ReplicaSet) -> Result<()> {
        let rs = normalize_replicaset(rs)?;
        let id = rs.replicaset_id;
        if self.user_map.get(user_id).is_some_and(|ids| ids.contains(&id)) {
            return Err(Error::DuplicateReplicaSet(id.to_string()));
        }
        if let Some(existing) = self.rs_map.get(&id) {
            if existing.replicaset.replicas != rs.replicas {
                return Err(Error::DuplicateReplicaSet(format!(
                    "{id} already registered with different replicas"
                )));
            }
        }
        self.journal_append(&JournalRecord::HolderRegister {
            user_id: user_id.to_string(),
            replicaset: rs.clone(),
        })?;
        self.apply_register(user_id, rs);
        Ok(())
    }

    fn apply_register(&mut self, user_id: &str, rs: ReplicaSet) {
        let id = rs.replicaset_id;
        let sources: Vec<String> = rs.source_ids().iter().map(|s| s.to_string()).collect();
        self.user_map.entry(user_id.to_string()).or_default().push(id);
        for source_id in &sources {
            let n = self.schemas.get(source_id).map(|s| s.n()).unwrap_or(0);
            let maps = self.granularity.entry((id, source_id.clone())).or_insert_with(|| {
                GranularityMaps::new(n)
            });
            maps.refresh_presence(true);
        }
        let load_status = rs
            .replicas
            .iter()
            .map(|vr| {
                let marker = self
                    .loaded
                    .contains(&(vr.source_id.clone(), vr.path.clone()))
                    .then_some(LoadMarker::Proxy);
                (vr.clone(), marker)
            })
            .collect();
        self.rs_map.insert(id, RsEntry { replicaset: rs, sources, load_status });
    }

    /// Replaces the replicas of a registered replicaset (scope update). The
    /// id, owner, and creation time are preserved.
    pub fn update(&mut self, replicaset_id: &ReplicaSetId, replicas: Vec<VirtualReplica>) -> Result<ReplicaSet> {
        let entry = self
            .rs_map
            .get(replicaset_id)
            .ok_or_else(|| Error::UnknownReplicaSet(replicaset_id.to_string()))?;
        let mut rs = entry.replicaset.clone();
        rs.replicas = replicas;
        let rs = normalize_replicaset(rs)?;
        self.journal_append(&JournalRecord::HolderUpdate { replicaset: rs.clone() })?;
        self.apply_update(rs.clone());
        Ok(rs)
    }

    fn apply_update(&mut self, rs: ReplicaSet) {
        let id = rs.replicaset_id;
        self.granularity.retain(|(rs_id, _), _| *rs_id != id);
        let sources: Vec<String> = rs.source_ids().iter().map(|s| s.to_string()).collect();
        for source_id in &sources {
            let n = self.schemas.get(source_id).map(|s| s.n()).unwrap_or(0);
            let maps = self
                .granularity
                .entry((id, source_id.clone()))
                .or_insert_with(|| GranularityMaps::new(n));
            maps.refresh_presence(true);
        }
        let load_status = rs
            .replicas
            .iter()
            .map(|vr| {
                let marker = self
                    .loaded
                    .contains(&(vr.source_id.clone(), vr.path.clone()))
                    .then_some(LoadMarker::Proxy);
                (vr.clone(), marker)
            })
            .collect();
        self.rs_map.insert(id, RsEntry { replicaset: rs, sources, load_status });
    }

    /// Removes a replicaset from a user. Load-status rows for the replicaset
    /// go away; repository data stays for gc. Other users' `get` answers are
    /// never perturbed.
    pub fn unregister(&mut self, user_id: &str, replicaset_id: &ReplicaSetId) -> Result<()> {
        let ids = self
            .user_map
            .get(user_id)
            .filter(|ids| ids.contains(replicaset_id))
            .ok_or_else(|| Error::UnknownReplicaSet(replicaset_id.to_string()))?;
        let _ = ids;
        self.journal_append(&JournalRecord::HolderUnregister {
            user_id: user_id.to_string(),
            replicaset_id: *replicaset_id,
        })?;
        self.apply_unregister(user_id, replicaset_id);
        Ok(())
    }

    fn apply_unregister(&mut self, user_id: &str, replicaset_id: &ReplicaSetId) {
        if let Some(ids) = self.user_map.get_mut(user_id) {
            ids.retain(|id| id != replicaset_id);
            if ids.is_empty() {
                self.user_map.remove(user_id);
            }
        }
        let still_referenced = self.user_map.values().any(|ids| ids.contains(replicaset_id));
        if !still_referenced {
            self.rs_map.remove(replicaset_id);
            self.granularity.retain(|(id, _), _| id != replicaset_id);
        }
    }

    pub fn resolve(&self, replicaset_id: &ReplicaSetId) -> Result<&ReplicaSet> {
        self.rs_map
            .get(replicaset_id)
            .map(|e| &e.replicaset)
            .ok_or_else(|| Error::UnknownReplicaSet(replicaset_id.to_string()))
    }

    pub fn list_user(&self, user_id: &str) -> Vec<&ReplicaSet> {
        self.user_map
            .get(user_id)
            .map(|ids| ids.iter().filter_map(|id| self.rs_map.get(id)).map(|e| &e.replicaset).collect())
            .unwrap_or_default()
    }

    pub fn owner_of(&self, replicaset_id: &ReplicaSetId) -> Vec<&str> {
        self.user_map
            .iter()
            .filter(|(_, ids)| ids.contains(replicaset_id))
            .map(|(user, _)| user.as_str())
            .collect()
    }

    /// Marks a replicaset as loaded now (sets `last_loaded_at`).
    pub fn mark_loaded(&mut self, replicaset_id: &ReplicaSetId) -> Result<()> {
        let at = now_millis();
        if self.rs_map.contains_key(replicaset_id) {
            self.journal_append(&JournalRecord::HolderLoaded { replicaset_id: *replicaset_id, at })?;
            self.apply(&JournalRecord::HolderLoaded { replicaset_id: *replicaset_id, at });
        }
        Ok(())
    }

    /// Union of all live replicasets' pointers, for gc.
    pub fn referenced_prefixes(&self) -> Vec<(String, EntryPath)> {
        let mut set: BTreeSet<(String, EntryPath)> = BTreeSet::new();
        for entry in self.rs_map.values() {
            for vr in &entry.replicaset.replicas {
                set.insert((vr.source_id.clone(), vr.path.clone()));
            }
        }
        set.into_iter().collect()
    }

    pub fn granularity_maps(&self, replicaset_id: &ReplicaSetId, source_id: &str) -> Option<&GranularityMaps> {
        self.granularity.get(&(*replicaset_id, source_id.to_string()))
    }

    pub fn sources_of(&self, replicaset_id: &ReplicaSetId) -> Option<&[String]> {
        self.rs_map.get(replicaset_id).map(|e| e.sources.as_slice())
    }

    /// A replicaset counts as integrated when every replica has load status.
    pub fn fully_loaded(&self, replicaset_id: &ReplicaSetId) -> bool {
        self.rs_map
            .get(replicaset_id)
            .map(|e| e.load_status.values().all(|m| m.is_some()))
            .unwrap_or(false)
    }

    /// Test support: equality of observable state.
    pub fn state_eq(&self, other: &Holder) -> bool {
        self.user_map == other.user_map
            && self.loaded == other.loaded
            && self.granularity == other.granularity
            && self.rs_map.len() == other.rs_map.len()
            && self.rs_map.iter().all(|(id, e)| {
                other
                    .rs_map
                    .get(id)
                    .is_some_and(|o| o.replicaset == e.replicaset && o.load_status == e.load_status)
            })
    }
}
