//! Replicaset exchange between engine instances: by id or by value, resolved
//! either through a remote-access grant against the sender's repository or
//! by re-loading from the original data sources.
//!
//! Envelopes are plain canonically-serialized documents, so they travel over
//! the service API or out of band (a file attached to an email works). An
//! id-only envelope has a fixed byte size for a given sender; a full
//! envelope grows linearly with the replica count. Neither carries data.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etl::{Engine, LoadReport, SelectiveLoad};
use crate::journal::{JournalRecord, SharedJournal};
use crate::model::{now_millis, to_canonical_json, ReplicaSet, ReplicaSetId, UserQuery};
use crate::repository::QueryOutcome;

/// Grant letting a receiver query the sender's repository remotely, scoped
/// at the sender to specific replicasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessGrant {
    pub api_key: String,
    pub sender_repo_uri: String,
    pub expiry: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvelopeKind {
    IdOnly { replicaset_id: ReplicaSetId, sender_uri: String },
    Full { replicaset: ReplicaSet },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareEnvelope {
    pub kind: EnvelopeKind,
    pub sender_instance: String,
    pub receiver_user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access_sender: Option<AccessGrant>,
}

impl ShareEnvelope {
    pub fn replicaset_id(&self) -> ReplicaSetId {
        match &self.kind {
            EnvelopeKind::IdOnly { replicaset_id, .. } => *replicaset_id,
            EnvelopeKind::Full { replicaset } => replicaset.replicaset_id,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_canonical_json(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Deserialize {
            offset: 0,
            message: format!("bad share envelope: {e}"),
        })
    }
}

/// Exact serialized envelope length in bytes.
pub fn measure_share_size(envelope: &ShareEnvelope) -> usize {
    envelope.to_bytes().len()
}

/// Which resolution path an import took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SharePath {
    /// Receiver queries proxy to the sender's repository.
    RemoteBinding,
    /// Receiver mirrored the pointed datasets from the original sources.
    LoadedFromSources,
    /// Sender and receiver are the same instance; the share degenerated to a
    /// holder registration for the receiving user.
    LocalRegistration,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShareResult {
    pub replicaset_id: ReplicaSetId,
    pub path_taken: SharePath,
    pub envelope_bytes: u64,
    /// Envelope plus any replicaset definition fetched from the sender.
    pub transferred_bytes: u64,
    pub load: Option<LoadReport>,
}

/// Receiver-side record of a remote-access share; survives restarts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteBinding {
    pub replicaset_id: ReplicaSetId,
    pub sender_uri: String,
    pub api_key: String,
    pub expiry: i64,
    pub receiver_user: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub replicaset_ids: Vec<ReplicaSetId>,
    pub expiry: i64,
}

/// Sharing state of one instance: exported ids (fetchable by receivers),
/// issued grants (sender side), and remote bindings (receiver side).
pub struct ShareState {
    journal: SharedJournal,
    exported: HashSet<ReplicaSetId>,
    grants: HashMap<String, Grant>,
    bindings: HashMap<ReplicaSetId, RemoteBinding>,
}

impl ShareState {
    pub fn new(journal: SharedJournal) -> Self {
        Self {
            journal,
            exported: HashSet::new(),
            grants: HashMap::new(),
            bindings: HashMap::new(),
        }
    }

    fn journal_append(&self, record: &JournalRecord) -> Result<()> {
        self.journal.lock().expect("journal lock").append(record)
    }

    pub fn apply(&mut self, record: &JournalRecord) {
        match record {
            JournalRecord::ShareExport { replicaset_id } => {
                self.exported.insert(*replicaset_id);
            }
            JournalRecord::GrantIssue { api_key, replicaset_ids, expiry } => {
                self.grants.insert(
                    api_key.clone(),
                    Grant { replicaset_ids: replicaset_ids.clone(), expiry: *expiry },
                );
            }
            JournalRecord::GrantRevoke { api_key } => {
                self.grants.remove(api_key);
            }
            JournalRecord::BindingAdd { replicaset_id, sender_uri, api_key, expiry, receiver_user } => {
                self.bindings.insert(
                    *replicaset_id,
                    RemoteBinding {
                        replicaset_id: *replicaset_id,
                        sender_uri: sender_uri.clone(),
                        api_key: api_key.clone(),
                        expiry: *expiry,
                        receiver_user: receiver_user.clone(),
                    },
                );
            }
            _ => {}
        }
    }

    pub fn mark_exported(&mut self, id: ReplicaSetId) -> Result<()> {
        if self.exported.insert(id) {
            self.journal_append(&JournalRecord::ShareExport { replicaset_id: id })?;
        }
        Ok(())
    }

    pub fn is_exported(&self, id: &ReplicaSetId) -> bool {
        self.exported.contains(id)
    }

    pub fn issue_grant(&mut self, replicaset_ids: Vec<ReplicaSetId>, expiry: i64) -> Result<String> {
        let api_key = hex::encode(rand::random::<[u8; 32]>());
        self.journal_append(&JournalRecord::GrantIssue {
            api_key: api_key.clone(),
            replicaset_ids: replicaset_ids.clone(),
            expiry,
        })?;
        self.grants.insert(api_key.clone(), Grant { replicaset_ids, expiry });
        Ok(api_key)
    }

    pub fn revoke_grant(&mut self, api_key: &str) -> Result<()> {
        if self.grants.remove(api_key).is_some() {
            self.journal_append(&JournalRecord::GrantRevoke { api_key: api_key.to_string() })?;
        }
        Ok(())
    }

    /// Validates a grant key against a replicaset scope and expiry.
    pub fn check_grant(&self, api_key: &str, id: &ReplicaSetId) -> Result<()> {
        let grant = self
            .grants
            .get(api_key)
            .ok_or_else(|| Error::AccessDenied("unknown or revoked key".into()))?;
        if grant.expiry <= now_millis() {
            return Err(Error::AccessDenied("grant expired".into()));
        }
        if !grant.replicaset_ids.contains(id) {
            return Err(Error::AccessDenied("replicaset outside granted scope".into()));
        }
        Ok(())
    }

    pub fn add_binding(&mut self, binding: RemoteBinding) -> Result<()> {
        self.journal_append(&JournalRecord::BindingAdd {
            replicaset_id: binding.replicaset_id,
            sender_uri: binding.sender_uri.clone(),
            api_key: binding.api_key.clone(),
            expiry: binding.expiry,
            receiver_user: binding.receiver_user.clone(),
        })?;
        self.bindings.insert(binding.replicaset_id, binding);
        Ok(())
    }

    pub fn binding(&self, id: &ReplicaSetId) -> Option<&RemoteBinding> {
        self.bindings.get(id)
    }
}

/// Transport abstraction for talking to a sender instance; implemented over
/// HTTP by the service client and in-process for tests.
pub trait SenderApi {
    /// Fetches a replicaset definition the sender exported.
    fn get_replicaset(&self, sender_uri: &str, id: &ReplicaSetId) -> Result<ReplicaSet>;

    /// Forwards a query to the sender, scoped to a shared replicaset.
    fn remote_query(
        &self,
        sender_uri: &str,
        api_key: &str,
        id: &ReplicaSetId,
        query: &UserQuery,
    ) -> Result<QueryOutcome>;
}

impl Engine {
    /// Sender side: prepares an envelope for a receiver. Marks the id
    /// exported (fetchable by possession of the id) and, when `with_access`
    /// is set, issues a scoped repository-access grant.
    pub fn export_envelope(
        &mut self,
        id: &ReplicaSetId,
        receiver_user: &str,
        sender_uri: &str,
        with_access: bool,
        grant_ttl_millis: i64,
        full: bool,
    ) -> Result<ShareEnvelope> {
        let rs = self.holder().resolve(id)?.clone();
        self.shares_mut().mark_exported(*id)?;
        let access_sender = if with_access {
            let expiry = now_millis() + grant_ttl_millis;
            let api_key = self.shares_mut().issue_grant(vec![*id], expiry)?;
            Some(AccessGrant { api_key, sender_repo_uri: sender_uri.to_string(), expiry })
        } else {
            None
        };
        let kind = if full {
            EnvelopeKind::Full { replicaset: rs }
        } else {
            EnvelopeKind::IdOnly { replicaset_id: *id, sender_uri: sender_uri.to_string() }
        };
        Ok(ShareEnvelope {
            kind,
            sender_instance: self.instance_id().to_string(),
            receiver_user: receiver_user.to_string(),
            access_sender,
        })
    }

    /// Sender side: serves an exported replicaset definition. Possession of
    /// the 128-bit id is the capability; ids that were never exported stay
    /// unknown.
    pub fn shared_replicaset(&self, id: &ReplicaSetId) -> Result<ReplicaSet> {
        if !self.shares().is_exported(id) {
            return Err(Error::UnknownReplicaSet(id.to_string()));
        }
        Ok(self.holder().resolve(id)?.clone())
    }

    /// Sender side: answers a remote query under a grant key. Results are
    /// scoped to the granted replicaset, so nothing outside the shared scope
    /// can leak regardless of the query.
    pub fn answer_remote_query(
        &self,
        api_key: &str,
        id: &ReplicaSetId,
        query: &UserQuery,
    ) -> Result<QueryOutcome> {
        self.shares().check_grant(api_key, id)?;
        let rs = self.holder().resolve(id)?.clone();
        self.repo().query(query, &rs)
    }

    /// Receiver side: imports an envelope (the data-sharing procedure).
    ///
    /// 1. An id-only envelope is resolved to the full replicaset via the
    ///    sender.
    /// 2. With an access grant, a persistent remote binding is recorded and
    ///    queries proxy to the sender's repository.
    /// 3. Otherwise the pointed datasets are selectively mirrored from the
    ///    original data sources (a NULL-query load: proxies only, no blobs).
    ///
    /// Importing the same envelope again converges to the same single
    /// registration. A share within one instance degenerates to a holder
    /// registration for the receiving user, with zero traffic.
    pub fn share_replicaset(
        &mut self,
        envelope: &ShareEnvelope,
        sender: &dyn SenderApi,
    ) -> Result<ShareResult> {
        let envelope_bytes = measure_share_size(envelope) as u64;
        let mut transferred_bytes = envelope_bytes;
        if let Some(grant) = &envelope.access_sender {
            if grant.expiry <= now_millis() {
                return Err(Error::AccessDenied("grant expired".into()));
            }
        }

        let same_instance = envelope.sender_instance == self.instance_id();
        let rs: ReplicaSet = match &envelope.kind {
            EnvelopeKind::IdOnly { replicaset_id, sender_uri } => {
                if same_instance {
                    self.holder().resolve(replicaset_id)?.clone()
                } else {
                    let rs = sender.get_replicaset(sender_uri, replicaset_id).map_err(|e| {
                        match e {
                            Error::UnknownReplicaSet(m) => Error::UnknownReplicaSet(m),
                            Error::AccessDenied(m) => Error::AccessDenied(m),
                            other => Error::ShareFailed(format!("sender fetch failed: {other}")),
                        }
                    })?;
                    transferred_bytes += to_canonical_json(&rs).len() as u64;
                    rs
                }
            }
            EnvelopeKind::Full { replicaset } => replicaset.clone(),
        };
        let id = rs.replicaset_id;

        // Converging registration: a repeat import of the same envelope is a
        // no-op here.
        let mut rs_for_user = rs.clone();
        rs_for_user.last_loaded_at = None;
        match self.holder_mut().register(&envelope.receiver_user, rs_for_user) {
            Ok(()) => {}
            Err(Error::DuplicateReplicaSet(_)) => {}
            Err(e) => return Err(e),
        }

        if same_instance {
            return Ok(ShareResult {
                replicaset_id: id,
                path_taken: SharePath::LocalRegistration,
                envelope_bytes,
                transferred_bytes: 0,
                load: None,
            });
        }

        if let Some(grant) = &envelope.access_sender {
            self.shares_mut().add_binding(RemoteBinding {
                replicaset_id: id,
                sender_uri: grant.sender_repo_uri.clone(),
                api_key: grant.api_key.clone(),
                expiry: grant.expiry,
                receiver_user: envelope.receiver_user.clone(),
            })?;
            Ok(ShareResult {
                replicaset_id: id,
                path_taken: SharePath::RemoteBinding,
                envelope_bytes,
                transferred_bytes,
                load: None,
            })
        } else {
            let SelectiveLoad { report, .. } = self
                .selective_load(&id, None)
                .map_err(|aborted| Error::ShareFailed(aborted.to_string()))?;
            Ok(ShareResult {
                replicaset_id: id,
                path_taken: SharePath::LoadedFromSources,
                envelope_bytes,
                transferred_bytes,
                load: Some(report),
            })
        }
    }

    /// Receiver side: forwards a query through a recorded remote binding.
    pub fn remote_query(
        &self,
        id: &ReplicaSetId,
        query: &UserQuery,
        sender: &dyn SenderApi,
    ) -> Result<QueryOutcome> {
        let binding = self
            .shares()
            .binding(id)
            .ok_or_else(|| Error::ShareFailed(format!("no remote binding for {id}")))?;
        if binding.expiry <= now_millis() {
            return Err(Error::AccessDenied("grant expired".into()));
        }
        sender.remote_query(&binding.sender_uri, &binding.api_key, id, query)
    }
}
