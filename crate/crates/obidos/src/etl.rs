//! The engine: selective hybrid loading driven by replicasets and user
//! queries, plus eager and lazy baselines sharing the same traffic meter,
//! and source refresh.
//!
//! The selective load procedure follows the incremental algorithm exactly:
//!
//! 1. `toLoad` starts as a copy of the replicaset.
//! 2. For each virtual replica: ask the holder whether it was loaded
//!    before; if not, run the load procedure, record it in the holder, and
//!    delete it from `toLoad`.
//! 3. If `toLoad` is non-empty (some replicas were holder hits) and the
//!    repository cannot answer the query completely, run the load procedure
//!    for everything left in `toLoad`.
//! 4. A final repository query produces the returned outcome.
//!
//! A NULL query (sharing path) skips every query-dependent step: subtrees
//! are mirrored as proxies only and the outcome carries proxy coverage.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::holder::Holder;
use crate::journal::{Journal, LoadMarker, SharedJournal};
use crate::model::{
    EntryPath, MetadataRecord, ReplicaSet, ReplicaSetId, UserQuery, VirtualReplica,
};
use crate::repository::{QueryOutcome, RepoEntry, Repository};
use crate::sharing::ShareState;
use crate::source::{enumerate_subtree, Connector, TransferStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EtlMode {
    Hybrid,
    Eager,
    Lazy,
}

impl std::fmt::Display for EtlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EtlMode::Hybrid => "Hybrid",
            EtlMode::Eager => "Eager",
            EtlMode::Lazy => "Lazy",
        })
    }
}

/// Accounting for one ETL run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub per_source: BTreeMap<String, TransferStats>,
    pub proxies_created: u64,
    pub records_promoted: u64,
    pub blobs_loaded: u64,
    pub query_rows: u64,
    pub served_from_repository: bool,
    pub elapsed_ms: u64,
}

impl LoadReport {
    pub fn total_stats(&self) -> TransferStats {
        let mut total = TransferStats::default();
        for stats in self.per_source.values() {
            total.add(stats);
        }
        total
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadCounters {
    pub proxies_created: u64,
    pub records_promoted: u64,
    pub blobs_loaded: u64,
}

/// Successful selective load: accounting plus the final query outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SelectiveLoad {
    pub report: LoadReport,
    pub outcome: QueryOutcome,
}

/// A load that aborted mid-run. Already-promoted records and proxies remain
/// in the repository (redo is idempotent); the holder recorded only replicas
/// that loaded fully.
#[derive(Debug)]
pub struct LoadAborted {
    pub error: Error,
    pub partial: LoadReport,
}

impl std::fmt::Display for LoadAborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "load aborted: {}", self.error)
    }
}

impl std::error::Error for LoadAborted {}

/// Instrumented trace of one selective load, for conformance checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    HolderGet { replica: String, hit: bool },
    LoadData { replica: String },
    HolderPut { replica: String },
    ToLoadDelete { replica: String },
    RepoNullCheck { complete: bool },
    FinalQuery { complete: bool },
}

/// One engine instance: repository, holder, sharing state, and registered
/// source connectors, all persisted under a single instance directory.
pub struct Engine {
    dir: PathBuf,
    instance_id: String,
    journal: SharedJournal,
    repo: Repository,
    holder: Holder,
    shares: ShareState,
    connectors: HashMap<String, Box<dyn Connector>>,
    trace: Option<Vec<TraceEvent>>,
}

impl Engine {
    /// Opens an instance directory, registers the given connectors, then
    /// rebuilds repository, holder, and sharing state by journal replay.
    /// Connectors for sources appearing in the journal must be registered
    /// here so schemas are known during replay.
    pub fn open(dir: impl Into<PathBuf>, connectors: Vec<Box<dyn Connector>>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let (journal, records) = Journal::open(dir.join("journal.log"))?;
        let repo = Repository::open(&dir, journal.clone())?;
        let holder = Holder::new(journal.clone());
        let shares = ShareState::new(journal.clone());
        let mut engine = Engine {
            dir,
            instance_id: "instance".to_string(),
            journal,
            repo,
            holder,
            shares,
            connectors: HashMap::new(),
            trace: None,
        };
        for conn in connectors {
            engine.register_connector(conn);
        }
        for record in &records {
            engine.repo.apply(record);
            engine.holder.apply(record);
            engine.shares.apply(record);
        }
        Ok(engine)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn set_instance_id(&mut self, id: impl Into<String>) {
        self.instance_id = id.into();
    }

    pub fn journal(&self) -> &SharedJournal {
        &self.journal
    }

    pub fn register_connector(&mut self, conn: Box<dyn Connector>) {
        let source_id = conn.source_id().to_string();
        let schema = conn.schema().clone();
        self.repo.register_schema(&source_id, schema.clone());
        self.holder.register_schema(&source_id, schema);
        self.connectors.insert(source_id, conn);
    }

    pub fn connector(&self, source_id: &str) -> Result<&dyn Connector> {
        self.connectors
            .get(source_id)
            .map(|c| c.as_ref())
            .ok_or_else(|| Error::SourceUnavailable(format!("source {source_id:?} not registered")))
    }

    pub fn source_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.connectors.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn repo(&self) -> &Repository {
        &self.repo
    }

    pub fn repo_mut(&mut self) -> &mut Repository {
        &mut self.repo
    }

    pub fn holder(&self) -> &Holder {
        &self.holder
    }

    pub fn holder_mut(&mut self) -> &mut Holder {
        &mut self.holder
    }

    pub fn shares(&self) -> &ShareState {
        &self.shares
    }

    pub fn shares_mut(&mut self) -> &mut ShareState {
        &mut self.shares
    }

    // -- tracing ------------------------------------------------------------

    pub fn start_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    fn trace(&mut self, event: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(event);
        }
    }

    // -- accounting ----------------------------------------------------------

    fn stats_snapshot(&self) -> BTreeMap<String, TransferStats> {
        self.connectors.iter().map(|(id, c)| (id.clone(), c.stats())).collect()
    }

    fn report_since(
        &self,
        before: &BTreeMap<String, TransferStats>,
        counters: LoadCounters,
        started: Instant,
    ) -> LoadReport {
        let mut per_source = BTreeMap::new();
        for (id, conn) in &self.connectors {
            let now = conn.stats();
            let delta = match before.get(id) {
                Some(earlier) => now.delta_since(earlier),
                None => now,
            };
            if !delta.is_zero() {
                per_source.insert(id.clone(), delta);
            }
        }
        let served_from_repository = per_source.is_empty()
            && counters.proxies_created == 0
            && counters.records_promoted == 0
            && counters.blobs_loaded == 0;
        LoadReport {
            per_source,
            proxies_created: counters.proxies_created,
            records_promoted: counters.records_promoted,
            blobs_loaded: counters.blobs_loaded,
            query_rows: 0,
            served_from_repository,
            elapsed_ms: started.elapsed().as_millis() as u64,
        }
    }

    // -- replicaset management ------------------------------------------------

    /// Registers a new replicaset (optionally with a caller-chosen id for
    /// idempotent creates) without loading anything yet.
    pub fn create_replicaset(
        &mut self,
        owner: &str,
        replicas: Vec<VirtualReplica>,
        id: Option<ReplicaSetId>,
    ) -> Result<ReplicaSet> {
        for vr in &replicas {
            let conn = self.connector(&vr.source_id)?;
            conn.schema().validate_path(&vr.path)?;
            if vr.path.depth() > conn.schema().n() {
                return Err(Error::InvalidPath(format!(
                    "{}: replica pointers address containers, not leaf payloads",
                    vr.path
                )));
            }
        }
        let mut rs = ReplicaSet::create(owner, replicas)?;
        if let Some(id) = id {
            if self.holder.resolve(&id).is_ok() {
                return Err(Error::DuplicateReplicaSet(id.to_string()));
            }
            rs.replicaset_id = id;
        }
        self.holder.register(owner, rs.clone())?;
        Ok(rs)
    }

    pub fn update_replicaset(
        &mut self,
        id: &ReplicaSetId,
        replicas: Vec<VirtualReplica>,
    ) -> Result<ReplicaSet> {
        for vr in &replicas {
            let conn = self.connector(&vr.source_id)?;
            conn.schema().validate_path(&vr.path)?;
        }
        self.holder.update(id, replicas)
    }

    pub fn delete_replicaset(&mut self, user: &str, id: &ReplicaSetId) -> Result<()> {
        self.holder.unregister(user, id)
    }

    /// Explicit orphan collection over the union of live references.
    pub fn gc(&mut self) -> Result<usize> {
        let referenced = self.holder.referenced_prefixes();
        self.repo.gc_orphans(&referenced)
    }

    // -- the selective load ----------------------------------------------------

    fn query_outcome(&self, query: Option<&UserQuery>, rs: &ReplicaSet) -> Result<QueryOutcome> {
        match query {
            Some(q) => self.repo.query(q, rs),
            None => Ok(self.repo.null_query_outcome(rs)),
        }
    }

    /// The repository answer counts as non-NULL only when the complete
    /// metadata AND data needed by the query are present: structural
    /// completeness, plus resolved blobs when the query asks for binaries.
    fn answerable(outcome: &QueryOutcome, query: Option<&UserQuery>) -> bool {
        outcome.complete
            && query.is_none_or(|q| !q.include_binary || outcome.blob_refs_resolved)
    }

    /// Runs the selective incremental load for a registered replicaset and
    /// returns the final outcome plus exact accounting. On a source failure
    /// the run aborts with the partial report; everything stored so far
    /// stays, and the holder recorded only fully loaded replicas.
    pub fn selective_load(
        &mut self,
        id: &ReplicaSetId,
        query: Option<&UserQuery>,
    ) -> std::result::Result<SelectiveLoad, LoadAborted> {
        let started = Instant::now();
        let before = self.stats_snapshot();
        let mut counters = LoadCounters::default();
        let abort = |engine: &Engine, e: Error, counters: LoadCounters| LoadAborted {
            error: e,
            partial: engine.report_since(&before, counters, started),
        };

        let rs = match self.holder.resolve(id) {
            Ok(rs) => rs.clone(),
            Err(e) => return Err(abort(self, e, counters)),
        };

        let mut to_load: Vec<VirtualReplica> = rs.replicas.clone();
        for vr in &rs.replicas {
            let hit = self.holder.get(vr);
            self.trace(TraceEvent::HolderGet { replica: vr.to_string(), hit });
            if !hit {
                self.trace(TraceEvent::LoadData { replica: vr.to_string() });
                if let Err(e) = self.load_data_counted(vr, query, &mut counters) {
                    return Err(abort(self, e, counters));
                }
                let marker = if query.is_some() { LoadMarker::Full } else { LoadMarker::Proxy };
                if let Err(e) = self.holder.put(vr, marker) {
                    return Err(abort(self, e, counters));
                }
                self.trace(TraceEvent::HolderPut { replica: vr.to_string() });
                to_load.retain(|x| x != vr);
                self.trace(TraceEvent::ToLoadDelete { replica: vr.to_string() });
            }
        }

        let mut outcome = None;
        if !to_load.is_empty() {
            let check = match self.query_outcome(query, &rs) {
                Ok(o) => o,
                Err(e) => return Err(abort(self, e, counters)),
            };
            let answerable = Self::answerable(&check, query);
            self.trace(TraceEvent::RepoNullCheck { complete: answerable });
            if !answerable {
                for vr in &to_load {
                    self.trace(TraceEvent::LoadData { replica: vr.to_string() });
                    if let Err(e) = self.load_data_counted(vr, query, &mut counters) {
                        return Err(abort(self, e, counters));
                    }
                }
            } else {
                outcome = Some(check);
            }
        }

        let outcome = match outcome {
            Some(o) => o,
            None => {
                let o = match self.query_outcome(query, &rs) {
                    Ok(o) => o,
                    Err(e) => return Err(abort(self, e, counters)),
                };
                self.trace(TraceEvent::FinalQuery { complete: o.complete });
                o
            }
        };

        if let Err(e) = self.holder.mark_loaded(id) {
            return Err(abort(self, e, counters));
        }
        let mut report = self.report_since(&before, counters, started);
        report.query_rows = outcome.rows.len() as u64;
        Ok(SelectiveLoad { report, outcome })
    }

    /// The load procedure for one virtual replica.
    ///
    /// (a) Mirrors the pointed subtree breadth-first as virtual proxies.
    /// (b) With a query: promotes every examined entry from the pointer down
    ///     through the target level (fetched records are always retained),
    ///     evaluates the predicates, and promotes the ancestors of hits so
    ///     hierarchical answers stay identifiable.
    /// (c) With `include_binary`: stores the blob of every leaf under each
    ///     hit and sets its record's blob reference.
    ///
    /// Entries already promoted are reused without re-fetching.
    pub fn load_data(
        &mut self,
        vr: &VirtualReplica,
        query: Option<&UserQuery>,
    ) -> Result<LoadCounters> {
        let mut counters = LoadCounters::default();
        self.load_data_counted(vr, query, &mut counters)?;
        Ok(counters)
    }

    fn load_data_counted(
        &mut self,
        vr: &VirtualReplica,
        query: Option<&UserQuery>,
        counters: &mut LoadCounters,
    ) -> Result<()> {
        let conn = self
            .connectors
            .get(&vr.source_id)
            .ok_or_else(|| Error::SourceUnavailable(format!("source {:?} not registered", vr.source_id)))?
            .as_ref();
        let schema = conn.schema().clone();
        schema.validate_path(&vr.path)?;

        // (a) Full-subtree proxy mirror. The pointer's own node (or the root
        // marker for a whole-source pointer) anchors structural completeness.
        let subtree = enumerate_subtree(conn, &vr.path, schema.max_depth())?;
        if vr.path.is_root() && self.repo.put_proxy(&vr.source_id, EntryPath::root())? {
            counters.proxies_created += 1;
        }
        for path in &subtree {
            if self.repo.put_proxy(&vr.source_id, path.clone())? {
                counters.proxies_created += 1;
            }
        }

        let Some(query) = query else {
            return Ok(());
        };

        // (b) Query-driven promotion.
        let target_depth = query.target_depth(&schema)?;
        if vr.path.depth() > target_depth {
            return Ok(());
        }
        let mut hits: Vec<EntryPath> = Vec::new();
        for node in subtree.iter().filter(|p| p.depth() <= target_depth) {
            let record = ensure_promoted(&mut self.repo, conn, &vr.source_id, node, counters)?;
            if node.depth() == target_depth && query.matches(&record.attributes) {
                hits.push(node.clone());
            }
        }
        if !hits.is_empty() {
            for depth in 1..vr.path.depth() {
                let ancestor = vr.path.prefix(depth);
                ensure_promoted(&mut self.repo, conn, &vr.source_id, &ancestor, counters)?;
            }
        }

        // (c) Binary payloads of matching rows.
        if query.include_binary {
            let leaf_depth = schema.max_depth();
            for hit in &hits {
                if hit.depth() == leaf_depth {
                    ensure_blob(&mut self.repo, conn, &vr.source_id, hit, counters)?;
                } else {
                    for leaf in subtree.iter().filter(|p| {
                        p.depth() == leaf_depth && hit.is_prefix_of(p)
                    }) {
                        ensure_blob(&mut self.repo, conn, &vr.source_id, leaf, counters)?;
                    }
                }
            }
        }
        Ok(())
    }

    // -- baselines ---------------------------------------------------------------

    /// Loads everything from every listed source: all metadata records and
    /// all blobs. Afterwards the repository answers any query completely.
    pub fn eager_etl(&mut self, source_ids: &[String]) -> Result<LoadReport> {
        let started = Instant::now();
        let before = self.stats_snapshot();
        let mut counters = LoadCounters::default();
        for source_id in source_ids {
            let conn = self.connector(source_id)?;
            let schema = conn.schema().clone();
            let conn = self.connectors[source_id].as_ref();
            let subtree = enumerate_subtree(conn, &EntryPath::root(), schema.max_depth())?;
            if self.repo.put_proxy(source_id, EntryPath::root())? {
                counters.proxies_created += 1;
            }
            for path in &subtree {
                let mut record = conn.fetch_metadata(path)?;
                if path.depth() == schema.max_depth() {
                    let (bytes, _) = conn.fetch_blob(path)?;
                    record.blob_ref = Some(self.repo.put_blob(&bytes)?);
                    counters.blobs_loaded += 1;
                }
                if self.repo.promote(source_id, record)? {
                    counters.records_promoted += 1;
                }
            }
        }
        Ok(self.report_since(&before, counters, started))
    }

    /// Eagerly loads the metadata of every listed source, and nothing else.
    pub fn lazy_etl_bootstrap(&mut self, source_ids: &[String]) -> Result<LoadReport> {
        let started = Instant::now();
        let before = self.stats_snapshot();
        let mut counters = LoadCounters::default();
        for source_id in source_ids {
            let conn = self.connector(source_id)?;
            let schema = conn.schema().clone();
            let conn = self.connectors[source_id].as_ref();
            let subtree = enumerate_subtree(conn, &EntryPath::root(), schema.max_depth())?;
            if self.repo.put_proxy(source_id, EntryPath::root())? {
                counters.proxies_created += 1;
            }
            for path in &subtree {
                let record = conn.fetch_metadata(path)?;
                if self.repo.promote(source_id, record)? {
                    counters.records_promoted += 1;
                }
            }
        }
        Ok(self.report_since(&before, counters, started))
    }

    /// Answers a query from the bootstrapped metadata, fetching blobs on
    /// demand when the query asks for binary data and retaining none of
    /// them: a repeat query pays the blob traffic again.
    pub fn lazy_etl_query(&mut self, query: &UserQuery) -> Result<(QueryOutcome, LoadReport)> {
        let started = Instant::now();
        let before = self.stats_snapshot();
        let counters = LoadCounters::default();
        let replicas: Vec<VirtualReplica> = self
            .source_ids()
            .into_iter()
            .map(|id| VirtualReplica::new(id, EntryPath::root()))
            .collect();
        let scope = ReplicaSet {
            replicaset_id: ReplicaSetId([0; 16]),
            owner_user_id: "lazy".into(),
            replicas,
            created_at: 0,
            last_loaded_at: None,
        };
        let outcome = self.repo.query(query, &scope)?;
        if query.include_binary {
            for row in &outcome.rows {
                let conn = self.connectors[&row.source_id].as_ref();
                let leaf_depth = conn.schema().max_depth();
                if row.record.path.depth() == leaf_depth {
                    conn.fetch_blob(&row.record.path)?;
                } else {
                    let leaves = enumerate_leaves_from_mirror(&self.repo, conn, &row.source_id, &row.record.path);
                    for leaf in leaves {
                        conn.fetch_blob(&leaf)?;
                    }
                }
            }
        }
        let mut report = self.report_since(&before, counters, started);
        report.query_rows = outcome.rows.len() as u64;
        Ok((outcome, report))
    }

    // -- refresh --------------------------------------------------------------

    /// Compares every Full record under a loaded replicaset against the
    /// sources: strictly newer source records are re-promoted, and a local
    /// record whose content disagrees with an equal-timestamp source copy is
    /// re-fetched (corruption or local change). Records that vanished
    /// upstream are left in place for gc policy to decide.
    pub fn refresh(&mut self, id: &ReplicaSetId) -> Result<LoadReport> {
        let started = Instant::now();
        let before = self.stats_snapshot();
        let mut counters = LoadCounters::default();
        let rs = self.holder.resolve(id)?.clone();
        for vr in &rs.replicas {
            let conn = self
                .connectors
                .get(&vr.source_id)
                .ok_or_else(|| {
                    Error::SourceUnavailable(format!("source {:?} not registered", vr.source_id))
                })?
                .as_ref();
            let locals: Vec<MetadataRecord> =
                self.repo.full_records_under(&vr.source_id, &vr.path).cloned().collect();
            for local in locals {
                match conn.fetch_metadata(&local.path) {
                    Ok(mut src) => {
                        if src.last_modified > local.last_modified {
                            if src.blob_ref.is_none() {
                                src.blob_ref = local.blob_ref.clone();
                            }
                            if self.repo.promote(&vr.source_id, src)? {
                                counters.records_promoted += 1;
                            }
                        } else if src.last_modified == local.last_modified
                            && src.content_hash() != local.content_hash()
                        {
                            if src.blob_ref.is_none() {
                                src.blob_ref = local.blob_ref.clone();
                            }
                            self.repo.promote_forced(&vr.source_id, src)?;
                            counters.records_promoted += 1;
                        }
                    }
                    Err(Error::PathNotFound(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        self.holder.mark_loaded(id)?;
        Ok(self.report_since(&before, counters, started))
    }

    /// Escape hatch outside the selective algorithm: unconditionally runs
    /// the load procedure for every replica of the set, regardless of holder
    /// state. For operators facing a repository that cannot satisfy a new
    /// query through the standard path.
    pub fn force_load(
        &mut self,
        id: &ReplicaSetId,
        query: Option<&UserQuery>,
    ) -> std::result::Result<SelectiveLoad, LoadAborted> {
        let started = Instant::now();
        let before = self.stats_snapshot();
        let mut counters = LoadCounters::default();
        let abort = |engine: &Engine, e: Error, counters: LoadCounters| LoadAborted {
            error: e,
            partial: engine.report_since(&before, counters, started),
        };
        let rs = match self.holder.resolve(id) {
            Ok(rs) => rs.clone(),
            Err(e) => return Err(abort(self, e, counters)),
        };
        for vr in &rs.replicas {
            if let Err(e) = self.load_data_counted(vr, query, &mut counters) {
                return Err(abort(self, e, counters));
            }
            let marker = if query.is_some() { LoadMarker::Full } else { LoadMarker::Proxy };
            if let Err(e) = self.holder.put(vr, marker) {
                return Err(abort(self, e, counters));
            }
        }
        let outcome = match self.query_outcome(query, &rs) {
            Ok(o) => o,
            Err(e) => return Err(abort(self, e, counters)),
        };
        if let Err(e) = self.holder.mark_loaded(id) {
            return Err(abort(self, e, counters));
        }
        let mut report = self.report_since(&before, counters, started);
        report.query_rows = outcome.rows.len() as u64;
        Ok(SelectiveLoad { report, outcome })
    }
}

fn ensure_promoted(
    repo: &mut Repository,
    conn: &dyn Connector,
    source_id: &str,
    path: &EntryPath,
    counters: &mut LoadCounters,
) -> Result<MetadataRecord> {
    if let Some(RepoEntry::Full(record)) = repo.get(source_id, path) {
        return Ok(record.clone());
    }
    let record = conn.fetch_metadata(path)?;
    if repo.promote(source_id, record.clone())? {
        counters.records_promoted += 1;
    }
    Ok(record)
}

fn ensure_blob(
    repo: &mut Repository,
    conn: &dyn Connector,
    source_id: &str,
    leaf: &EntryPath,
    counters: &mut LoadCounters,
) -> Result<()> {
    if let Some(RepoEntry::Full(record)) = repo.get(source_id, leaf) {
        if let Some(hash) = &record.blob_ref {
            if repo.has_blob(hash) {
                return Ok(());
            }
        }
    }
    let (bytes, _) = conn.fetch_blob(leaf)?;
    let hash = repo.put_blob(&bytes)?;
    let mut record = match repo.get(source_id, leaf) {
        Some(RepoEntry::Full(r)) => r.clone(),
        _ => conn.fetch_metadata(leaf)?,
    };
    record.blob_ref = Some(hash);
    if repo.promote(source_id, record)? {
        counters.records_promoted += 1;
    }
    counters.blobs_loaded += 1;
    Ok(())
}

/// Leaf paths under a container, walked from the repository's mirrored
/// structure (no source listing traffic).
fn enumerate_leaves_from_mirror(
    repo: &Repository,
    conn: &dyn Connector,
    source_id: &str,
    under: &EntryPath,
) -> Vec<EntryPath> {
    let schema = conn.schema();
    let leaf_depth = schema.max_depth();
    let mut leaves = Vec::new();
    let mut stack = vec![under.clone()];
    while let Some(path) = stack.pop() {
        if path.depth() == leaf_depth {
            leaves.push(path);
            continue;
        }
        let Some(level) = schema.level_at(path.depth() + 1) else { continue };
        if let Some(ids) = repo.children_of(source_id, &path) {
            for id in ids {
                if let Ok(child) = path.child(level, id) {
                    stack.push(child);
                }
            }
        }
    }
    leaves.sort();
    leaves
}
