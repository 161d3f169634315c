//! Core domain model: hierarchical schemas, entry addressing, replicasets,
//! metadata records, and queries.
//!
//! All model types are immutable values; they are cheap to clone and safe to
//! send between threads. Timestamps are integer milliseconds since the Unix
//! epoch, UTC.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Path separator used in the textual form of an [`EntryPath`]. Entry ids
/// must never contain this character.
pub const PATH_SEPARATOR: char = '/';

pub fn now_millis() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("system clock before epoch")
        .as_millis() as i64
}

/// Serializes a value to its canonical text encoding: compact JSON with all
/// object keys in sorted order. One logical value has exactly one byte form.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("value must be serializable");
    serde_json::to_vec(&v).expect("json value must be serializable")
}

/// SHA-256 of the canonical encoding, as lowercase hex.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(to_canonical_json(value)))
}

// ---------------------------------------------------------------------------
// Granularity schema
// ---------------------------------------------------------------------------

/// The ordered container levels of a hierarchical source, plus the name of
/// the leaf payload level that hangs below the deepest container.
///
/// For the default medical profile the container levels are
/// `collection / patient / study / series` (n = 4) and the leaf payloads are
/// `image` blobs stored under each series.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySchema {
    levels: Vec<String>,
    leaf_level: String,
}

impl GranularitySchema {
    pub fn new(levels: Vec<String>, leaf_level: impl Into<String>) -> Result<Self> {
        let leaf_level = leaf_level.into();
        if levels.is_empty() {
            return Err(Error::InvalidSchema("schema needs at least one level".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for level in levels.iter().chain(std::iter::once(&leaf_level)) {
            if level.is_empty() {
                return Err(Error::InvalidSchema("empty level name".into()));
            }
            if !seen.insert(level.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate level name {level:?}")));
            }
        }
        Ok(Self { levels, leaf_level })
    }

    /// The default DICOM-style profile: collection/patient/study/series with
    /// image leaves.
    pub fn medical() -> Self {
        Self::new(
            vec![
                "collection".to_string(),
                "patient".to_string(),
                "study".to_string(),
                "series".to_string(),
            ],
            "image",
        )
        .expect("medical profile is valid")
    }

    /// Number of container levels (the `n` of the per-source maps).
    pub fn n(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn leaf_level(&self) -> &str {
        &self.leaf_level
    }

    /// Depth of a level name: container levels are 1..=n, the leaf level is
    /// n + 1. Unknown names return `None`.
    pub fn depth_of(&self, level: &str) -> Option<usize> {
        if level == self.leaf_level {
            return Some(self.n() + 1);
        }
        self.levels.iter().position(|l| l == level).map(|i| i + 1)
    }

    /// Level name at a 1-based depth (n + 1 is the leaf level).
    pub fn level_at(&self, depth: usize) -> Option<&str> {
        if depth == 0 {
            None
        } else if depth <= self.n() {
            Some(&self.levels[depth - 1])
        } else if depth == self.n() + 1 {
            Some(&self.leaf_level)
        } else {
            None
        }
    }

    /// Deepest addressable depth (leaf payloads).
    pub fn max_depth(&self) -> usize {
        self.n() + 1
    }

    /// Checks the segment levels of `path` against this schema's level order.
    pub fn validate_path(&self, path: &EntryPath) -> Result<()> {
        if path.depth() > self.max_depth() {
            return Err(Error::InvalidPath(format!(
                "path {path} deeper than schema ({} levels + leaf)",
                self.n()
            )));
        }
        for (i, seg) in path.segments().iter().enumerate() {
            let expect = self.level_at(i + 1).expect("depth checked above");
            if seg.level != expect {
                return Err(Error::InvalidPath(format!(
                    "segment {} of {path} has level {:?}, expected {:?}",
                    i, seg.level, expect
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Entry paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathSegment {
    pub level: String,
    pub id: String,
}

/// Address of one entry inside a hierarchical source: an ordered list of
/// (level, id) segments. Depth 0 is the source root; depth n addresses the
/// deepest container; depth n + 1 addresses a leaf payload (image).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryPath {
    segments: Vec<PathSegment>,
}

impl EntryPath {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn new(segments: Vec<PathSegment>) -> Result<Self> {
        for seg in &segments {
            if seg.id.is_empty() {
                return Err(Error::InvalidPath("empty entry id".into()));
            }
            if seg.id.contains(PATH_SEPARATOR) {
                return Err(Error::InvalidPath(format!(
                    "entry id {:?} contains path separator",
                    seg.id
                )));
            }
        }
        Ok(Self { segments })
    }

    /// Builds a path from bare ids, taking level names from the schema.
    pub fn from_ids<S: AsRef<str>>(schema: &GranularitySchema, ids: &[S]) -> Result<Self> {
        if ids.len() > schema.max_depth() {
            return Err(Error::InvalidPath(format!(
                "{} ids exceed schema max depth {}",
                ids.len(),
                schema.max_depth()
            )));
        }
        let segments = ids
            .iter()
            .enumerate()
            .map(|(i, id)| PathSegment {
                level: schema.level_at(i + 1).expect("len checked").to_string(),
                id: id.as_ref().to_string(),
            })
            .collect();
        Self::new(segments)
    }

    /// Parses the `/`-separated textual form against a schema. The empty
    /// string is the root path.
    pub fn parse(schema: &GranularitySchema, text: &str) -> Result<Self> {
        if text.is_empty() {
            return Ok(Self::root());
        }
        let ids: Vec<&str> = text.split(PATH_SEPARATOR).collect();
        if ids.iter().any(|id| id.is_empty()) {
            return Err(Error::InvalidPath(format!("empty segment in {text:?}")));
        }
        Self::from_ids(schema, &ids)
    }

    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[PathSegment] {
        &self.segments
    }

    pub fn last_id(&self) -> Option<&str> {
        self.segments.last().map(|s| s.id.as_str())
    }

    pub fn last_level(&self) -> Option<&str> {
        self.segments.last().map(|s| s.level.as_str())
    }

    pub fn child(&self, level: impl Into<String>, id: impl Into<String>) -> Result<Self> {
        let mut segments = self.segments.clone();
        segments.push(PathSegment { level: level.into(), id: id.into() });
        Self::new(segments)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.segments.is_empty() {
            None
        } else {
            Some(Self { segments: self.segments[..self.segments.len() - 1].to_vec() })
        }
    }

    /// Prefix of this path truncated to `depth` segments.
    pub fn prefix(&self, depth: usize) -> Self {
        Self { segments: self.segments[..depth.min(self.segments.len())].to_vec() }
    }

    /// True iff `self` is a (non-strict) prefix of `other`.
    pub fn is_prefix_of(&self, other: &EntryPath) -> bool {
        self.segments.len() <= other.segments.len()
            && self.segments == other.segments[..self.segments.len()]
    }

    pub fn is_strict_prefix_of(&self, other: &EntryPath) -> bool {
        self.segments.len() < other.segments.len() && self.is_prefix_of(other)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.id.as_str()).collect()
    }
}

impl fmt::Display for EntryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for seg in &self.segments {
            if !first {
                write!(f, "{PATH_SEPARATOR}")?;
            }
            write!(f, "{}", seg.id)?;
            first = false;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Replicas and replicasets
// ---------------------------------------------------------------------------

/// A pointer to a dataset: a source plus a path prefix selecting a subtree.
/// Depth 0 selects the whole source. Pointers address containers only, never
/// individual leaf payloads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VirtualReplica {
    pub source_id: String,
    pub path: EntryPath,
}

impl VirtualReplica {
    pub fn new(source_id: impl Into<String>, path: EntryPath) -> Self {
        Self { source_id: source_id.into(), path }
    }
}

impl fmt::Display for VirtualReplica {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.source_id, self.path)
    }
}

/// Random 128-bit replicaset identifier, rendered as 32 lowercase hex chars.
/// Assigned once at creation and immutable across updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReplicaSetId(pub [u8; 16]);

impl ReplicaSetId {
    pub fn random() -> Self {
        Self(rand::random())
    }
}

impl fmt::Display for ReplicaSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl FromStr for ReplicaSetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s)
            .map_err(|e| Error::InvalidReplicaSet(format!("bad replicaset id {s:?}: {e}")))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| Error::InvalidReplicaSet(format!("replicaset id {s:?} must be 16 bytes")))?;
        Ok(Self(arr))
    }
}

impl Serialize for ReplicaSetId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ReplicaSetId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A named, timestamped set of virtual replicas owned by one user.
///
/// A stored replicaset is always in normalized form: no replica is a strict
/// path-prefix of another replica of the same source, and replicas are
/// sorted by (source id, path).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaSet {
    pub replicaset_id: ReplicaSetId,
    pub owner_user_id: String,
    pub replicas: Vec<VirtualReplica>,
    pub created_at: i64,
    pub last_loaded_at: Option<i64>,
}

impl ReplicaSet {
    /// Creates a normalized replicaset with a fresh random id.
    pub fn create(owner: impl Into<String>, replicas: Vec<VirtualReplica>) -> Result<Self> {
        let rs = ReplicaSet {
            replicaset_id: ReplicaSetId::random(),
            owner_user_id: owner.into(),
            replicas,
            created_at: now_millis(),
            last_loaded_at: None,
        };
        normalize_replicaset(rs)
    }

    pub fn source_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.replicas.iter().map(|r| r.source_id.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn is_normalized(&self) -> bool {
        if self.replicas.is_empty() {
            return false;
        }
        if !self.replicas.windows(2).all(|w| w[0] < w[1]) {
            return false;
        }
        !self.replicas.iter().enumerate().any(|(i, a)| {
            self.replicas
                .iter()
                .enumerate()
                .any(|(j, b)| i != j && a.source_id == b.source_id && b.path.is_strict_prefix_of(&a.path))
        })
    }
}

/// Removes replicas absorbed by a broader pointer of the same source (the
/// shallower pointer wins), drops exact duplicates, and sorts canonically.
pub fn normalize_replicaset(mut rs: ReplicaSet) -> Result<ReplicaSet> {
    rs.replicas.sort();
    rs.replicas.dedup();
    let kept: Vec<VirtualReplica> = rs
        .replicas
        .iter()
        .filter(|r| {
            !rs.replicas
                .iter()
                .any(|other| other.source_id == r.source_id && other.path.is_strict_prefix_of(&r.path))
        })
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidReplicaSet("replicaset has no replicas".into()));
    }
    rs.replicas = kept;
    Ok(rs)
}

/// True iff some replica of `rs` points at `source_id` with a path that is a
/// prefix of (or equal to) `path`.
pub fn covers(rs: &ReplicaSet, source_id: &str, path: &EntryPath) -> bool {
    rs.replicas
        .iter()
        .any(|r| r.source_id == source_id && r.path.is_prefix_of(path))
}

/// The per-source boolean presence array `A_b` of length n.
///
/// Element i is true iff the replicaset implies entries at container level
/// i + 1 for that source: a replica of depth d names levels 1..=d explicitly
/// and its subtree includes every finer level, so any replica for the source
/// sets the whole array (a depth-0 replica is the whole source).
pub fn presence_array(rs: &ReplicaSet, source_id: &str, schema: &GranularitySchema) -> Result<Vec<bool>> {
    if !rs.replicas.iter().any(|r| r.source_id == source_id) {
        return Err(Error::SourceNotInReplicaSet(source_id.to_string()));
    }
    Ok(vec![true; schema.n()])
}

/// Canonical byte encoding of a normalized replicaset.
pub fn serialize_replicaset(rs: &ReplicaSet) -> Result<Vec<u8>> {
    if !rs.is_normalized() {
        return Err(Error::InvalidReplicaSet(
            "only normalized, non-empty replicasets are serialized".into(),
        ));
    }
    Ok(to_canonical_json(rs))
}

/// Inverse of [`serialize_replicaset`]. Rejects malformed bytes and any
/// document that is not a normalized replicaset, reporting a byte offset.
pub fn deserialize_replicaset(bytes: &[u8]) -> Result<ReplicaSet> {
    let rs: ReplicaSet = serde_json::from_slice(bytes).map_err(|e| Error::Deserialize {
        offset: offset_of_json_error(bytes, &e),
        message: e.to_string(),
    })?;
    for r in &rs.replicas {
        EntryPath::new(r.path.segments().to_vec()).map_err(|e| Error::Deserialize {
            offset: 0,
            message: e.to_string(),
        })?;
    }
    if !rs.is_normalized() {
        return Err(Error::Deserialize {
            offset: 0,
            message: "replicaset is empty or not in normalized form".into(),
        });
    }
    Ok(rs)
}

fn offset_of_json_error(input: &[u8], err: &serde_json::Error) -> usize {
    let (line, column) = (err.line(), err.column());
    if line == 0 {
        return 0;
    }
    let mut offset = 0usize;
    for (i, l) in input.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(input.len());
        }
        offset += l.len() + 1;
    }
    input.len()
}

// ---------------------------------------------------------------------------
// Attribute values, metadata records, proxies
// ---------------------------------------------------------------------------

/// Scalar attribute value. Nested metadata is flattened with dotted keys
/// upstream; only scalars reach the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AttrValue {
    #[serde(rename = "s")]
    Str(String),
    #[serde(rename = "i")]
    Int(i64),
    #[serde(rename = "f")]
    Float(f64),
    #[serde(rename = "t")]
    Ts(i64),
}

impl AttrValue {
    /// Maps a plain JSON scalar (as found in source sidecar files and API
    /// bodies) to an attribute value. Objects of the form `{"t": millis}`
    /// denote timestamps.
    pub fn from_plain_json(v: &serde_json::Value) -> Result<AttrValue> {
        match v {
            serde_json::Value::String(s) => Ok(AttrValue::Str(s.clone())),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok(AttrValue::Int(i))
                } else if let Some(f) = n.as_f64() {
                    Ok(AttrValue::Float(f))
                } else {
                    Err(Error::InvalidRecord(format!("unrepresentable number {n}")))
                }
            }
            serde_json::Value::Object(m) if m.len() == 1 => match m.get("t") {
                Some(serde_json::Value::Number(n)) if n.as_i64().is_some() => {
                    Ok(AttrValue::Ts(n.as_i64().unwrap()))
                }
                _ => Err(Error::InvalidRecord(format!("not a scalar attribute: {v}"))),
            },
            other => Err(Error::InvalidRecord(format!("not a scalar attribute: {other}"))),
        }
    }

    pub fn to_plain_json(&self) -> serde_json::Value {
        match self {
            AttrValue::Str(s) => serde_json::Value::String(s.clone()),
            AttrValue::Int(i) => serde_json::json!(i),
            AttrValue::Float(f) => serde_json::json!(f),
            AttrValue::Ts(t) => serde_json::json!({ "t": t }),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            AttrValue::Str(_) => 0,
            AttrValue::Int(_) => 1,
            AttrValue::Float(_) => 2,
            AttrValue::Ts(_) => 3,
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            AttrValue::Int(i) => Some(*i as f64),
            AttrValue::Float(f) => Some(*f),
            _ => None,
        }
    }
}

impl PartialEq for AttrValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for AttrValue {}

impl PartialOrd for AttrValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AttrValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use AttrValue::*;
        match (self, other) {
            (Str(a), Str(b)) => a.cmp(b),
            (Int(a), Int(b)) => a.cmp(b),
            (Float(a), Float(b)) => a.total_cmp(b),
            (Ts(a), Ts(b)) => a.cmp(b),
            // Numeric cross-type ordering so Int and Float interleave in the
            // index; everything else orders by type tag.
            (Int(a), Float(b)) => (*a as f64).total_cmp(b),
            (Float(a), Int(b)) => a.total_cmp(&(*b as f64)),
            (a, b) => a.tag().cmp(&b.tag()),
        }
    }
}

impl From<&str> for AttrValue {
    fn from(s: &str) -> Self {
        AttrValue::Str(s.to_string())
    }
}

impl From<i64> for AttrValue {
    fn from(i: i64) -> Self {
        AttrValue::Int(i)
    }
}

impl From<f64> for AttrValue {
    fn from(f: f64) -> Self {
        AttrValue::Float(f)
    }
}

/// Full attribute record for one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub path: EntryPath,
    pub attributes: BTreeMap<String, AttrValue>,
    pub last_modified: i64,
    /// Serialized metadata size at the source (sidecar byte length).
    pub size_bytes: u64,
    /// Content hash of the leaf payload, set once the blob is stored locally.
    pub blob_ref: Option<String>,
}

impl MetadataRecord {
    pub fn validate(&self) -> Result<()> {
        if self.path.is_root() {
            return Err(Error::InvalidRecord("record path must not be root".into()));
        }
        if self.size_bytes == 0 {
            return Err(Error::InvalidRecord(format!("{}: size_bytes must be > 0", self.path)));
        }
        let last = self.path.last_id().expect("non-root");
        match self.attributes.get("id") {
            Some(AttrValue::Str(id)) if id == last => Ok(()),
            _ => Err(Error::InvalidRecord(format!(
                "{}: attributes must contain id == {last:?}",
                self.path
            ))),
        }
    }

    /// Hash of the source-visible content (path, attributes, size,
    /// last_modified), excluding locally-assigned fields like `blob_ref`.
    /// Used by refresh to detect corruption or silent changes.
    pub fn content_hash(&self) -> String {
        #[derive(Serialize)]
        struct Content<'a> {
            path: &'a EntryPath,
            attributes: &'a BTreeMap<String, AttrValue>,
            last_modified: i64,
            size_bytes: u64,
        }
        canonical_hash(&Content {
            path: &self.path,
            attributes: &self.attributes,
            last_modified: self.last_modified,
            size_bytes: self.size_bytes,
        })
    }
}

/// Id-only placeholder awaiting promotion to a full metadata record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualProxy {
    pub path: EntryPath,
    pub discovered_at: i64,
}

// ---------------------------------------------------------------------------
// Queries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredicateOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "contains")]
    Contains,
}

impl FromStr for PredicateOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "=" | "==" => PredicateOp::Eq,
            "!=" => PredicateOp::Ne,
            "<" => PredicateOp::Lt,
            "<=" => PredicateOp::Le,
            ">" => PredicateOp::Gt,
            ">=" => PredicateOp::Ge,
            "contains" => PredicateOp::Contains,
            other => return Err(Error::InvalidQuery(format!("unknown operator {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub attribute: String,
    pub op: PredicateOp,
    pub value: AttrValue,
}

impl Predicate {
    /// Evaluates against an attribute map. A missing attribute never
    /// satisfies any operator (including `!=`); so does a type mismatch
    /// outside the Int/Float numeric pairing.
    pub fn eval(&self, attrs: &BTreeMap<String, AttrValue>) -> bool {
        let Some(actual) = attrs.get(&self.attribute) else {
            return false;
        };
        match self.op {
            PredicateOp::Contains => match (actual, &self.value) {
                (AttrValue::Str(hay), AttrValue::Str(needle)) => hay.contains(needle.as_str()),
                _ => false,
            },
            op => {
                let ord = match (actual, &self.value) {
                    (AttrValue::Str(a), AttrValue::Str(b)) => a.cmp(b),
                    (AttrValue::Ts(a), AttrValue::Ts(b)) => a.cmp(b),
                    (a, b) => match (a.as_f64(), b.as_f64()) {
                        (Some(x), Some(y)) => {
                            if let Some(o) = x.partial_cmp(&y) {
                                o
                            } else {
                                return false;
                            }
                        }
                        _ => return false,
                    },
                };
                match op {
                    PredicateOp::Eq => ord.is_eq(),
                    PredicateOp::Ne => ord.is_ne(),
                    PredicateOp::Lt => ord.is_lt(),
                    PredicateOp::Le => ord.is_le(),
                    PredicateOp::Gt => ord.is_gt(),
                    PredicateOp::Ge => ord.is_ge(),
                    PredicateOp::Contains => unreachable!(),
                }
            }
        }
    }
}

/// A conjunctive predicate query against one granularity level. An empty
/// predicate list matches every entry at the target level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserQuery {
    pub target_level: String,
    #[serde(default)]
    pub predicates: Vec<Predicate>,
    #[serde(default)]
    pub include_binary: bool,
}

impl UserQuery {
    pub fn match_all(target_level: impl Into<String>) -> Self {
        Self { target_level: target_level.into(), predicates: Vec::new(), include_binary: false }
    }

    pub fn matches(&self, attrs: &BTreeMap<String, AttrValue>) -> bool {
        self.predicates.iter().all(|p| p.eval(attrs))
    }

    /// Resolves the target level to a depth in `schema`.
    pub fn target_depth(&self, schema: &GranularitySchema) -> Result<usize> {
        schema
            .depth_of(&self.target_level)
            .ok_or_else(|| Error::InvalidQuery(format!("unknown level {:?}", self.target_level)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> GranularitySchema {
        GranularitySchema::medical()
    }

    fn path(ids: &[&str]) -> EntryPath {
        EntryPath::from_ids(&schema(), ids).unwrap()
    }

    fn rs_of(replicas: Vec<VirtualReplica>) -> ReplicaSet {
        ReplicaSet {
            replicaset_id: ReplicaSetId([7; 16]),
            owner_user_id: "u1".into(),
            replicas,
            created_at: 1_000,
            last_loaded_at: None,
        }
    }

    #[test]
    fn schema_depths() {
        let s = schema();
        assert_eq!(s.n(), 4);
        assert_eq!(s.depth_of("collection"), Some(1));
        assert_eq!(s.depth_of("series"), Some(4));
        assert_eq!(s.depth_of("image"), Some(5));
        assert_eq!(s.depth_of("nope"), None);
        assert_eq!(s.level_at(5), Some("image"));
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        assert!(GranularitySchema::new(vec![], "leaf").is_err());
        assert!(GranularitySchema::new(vec!["a".into(), "a".into()], "leaf").is_err());
        assert!(GranularitySchema::new(vec!["a".into()], "a").is_err());
    }

    #[test]
    fn path_parse_and_display() {
        let p = EntryPath::parse(&schema(), "C1/P1/S1").unwrap();
        assert_eq!(p.depth(), 3);
        assert_eq!(p.to_string(), "C1/P1/S1");
        assert_eq!(p.last_level(), Some("study"));
        assert_eq!(EntryPath::parse(&schema(), "").unwrap(), EntryPath::root());
        assert!(EntryPath::parse(&schema(), "C1//S1").is_err());
    }

    #[test]
    fn path_rejects_separator_in_id() {
        assert!(EntryPath::root().child("collection", "a/b").is_err());
    }

    #[test]
    fn path_prefix_relations() {
        let a = path(&["C1"]);
        let b = path(&["C1", "P2", "S1"]);
        assert!(a.is_prefix_of(&b));
        assert!(a.is_strict_prefix_of(&b));
        assert!(!b.is_prefix_of(&a));
        assert!(a.is_prefix_of(&a));
        assert!(!a.is_strict_prefix_of(&a));
        assert!(EntryPath::root().is_prefix_of(&a));
    }

    #[test]
    fn normalize_absorbs_prefixes() {
        // {[src1, C1/P1], [src1, C1]} -> {[src1, C1]}
        let rs = rs_of(vec![
            VirtualReplica::new("src1", path(&["C1", "P1"])),
            VirtualReplica::new("src1", path(&["C1"])),
        ]);
        let out = normalize_replicaset(rs).unwrap();
        assert_eq!(out.replicas, vec![VirtualReplica::new("src1", path(&["C1"]))]);
    }

    #[test]
    fn normalize_keeps_distinct_sources_sorted() {
        let rs = rs_of(vec![
            VirtualReplica::new("src2", path(&["C1"])),
            VirtualReplica::new("src1", path(&["C1"])),
        ]);
        let out = normalize_replicaset(rs).unwrap();
        assert_eq!(out.replicas.len(), 2);
        assert_eq!(out.replicas[0].source_id, "src1");
        assert_eq!(out.replicas[1].source_id, "src2");
    }

    #[test]
    fn normalize_rejects_empty() {
        assert!(matches!(normalize_replicaset(rs_of(vec![])), Err(Error::InvalidReplicaSet(_))));
    }

    /// Independent O(k^2) oracle: keep a replica iff no other distinct
    /// replica of the same source has a path that strictly prefixes it.
    fn brute_force_normalize(replicas: &[VirtualReplica]) -> Vec<VirtualReplica> {
        let mut dedup: Vec<VirtualReplica> = Vec::new();
        for r in replicas {
            if !dedup.contains(r) {
                dedup.push(r.clone());
            }
        }
        let mut keep = Vec::new();
        for (i, a) in dedup.iter().enumerate() {
            let mut absorbed = false;
            for (j, b) in dedup.iter().enumerate() {
                if i != j
                    && a.source_id == b.source_id
                    && b.path.segments().len() < a.path.segments().len()
                    && a.path.segments()[..b.path.segments().len()] == *b.path.segments()
                {
                    absorbed = true;
                    break;
                }
            }
            if !absorbed {
                keep.push(a.clone());
            }
        }
        keep.sort();
        keep
    }

    #[test]
    fn normalize_matches_brute_force_on_random_sets() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(42);
        let s = schema();
        for _ in 0..50 {
            let mut replicas = Vec::new();
            for _ in 0..20 {
                let depth = rng.random_range(0..=4usize);
                let mut ids = Vec::new();
                for (i, prefix) in ["C", "P", "S", "SE"].iter().enumerate().take(depth) {
                    ids.push(format!("{prefix}{}", rng.random_range(1..=3u32) + i as u32));
                }
                let src = format!("src{}", rng.random_range(1..=2u32));
                replicas.push(VirtualReplica::new(src, EntryPath::from_ids(&s, &ids).unwrap()));
            }
            let expect = brute_force_normalize(&replicas);
            let got = normalize_replicaset(rs_of(replicas));
            match got {
                Ok(rs) => assert_eq!(rs.replicas, expect),
                Err(_) => assert!(expect.is_empty()),
            }
        }
    }

    #[test]
    fn covers_basic() {
        let rs = rs_of(vec![VirtualReplica::new("src1", path(&["C1"]))]);
        assert!(covers(&rs, "src1", &path(&["C1", "P2", "S1"])));
        assert!(!covers(&rs, "src2", &path(&["C1", "P2", "S1"])));
        let rs2 = rs_of(vec![VirtualReplica::new("src1", path(&["C1", "P1"]))]);
        assert!(!covers(&rs2, "src1", &path(&["C1", "P2"])));
    }

    #[test]
    fn covers_counts_leaves_of_one_collection() {
        // Hand-built 2x2x2x2x2 tree: 32 leaves, half under C1.
        let s = schema();
        let mut leaves = Vec::new();
        for c in 1..=2 {
            for p in 1..=2 {
                for st in 1..=2 {
                    for se in 1..=2 {
                        for i in 1..=2 {
                            let ids = [
                                format!("C{c}"),
                                format!("P{p}"),
                                format!("S{st}"),
                                format!("SE{se}"),
                                format!("I{i}"),
                            ];
                            leaves.push(EntryPath::from_ids(&s, &ids).unwrap());
                        }
                    }
                }
            }
        }
        assert_eq!(leaves.len(), 32);
        let rs = rs_of(vec![VirtualReplica::new("src1", path(&["C1"]))]);
        let covered = leaves.iter().filter(|l| covers(&rs, "src1", l)).count();
        assert_eq!(covered, 16);
    }

    #[test]
    fn presence_array_semantics() {
        let s = schema();
        let whole = rs_of(vec![VirtualReplica::new("src1", EntryPath::root())]);
        assert_eq!(presence_array(&whole, "src1", &s).unwrap(), vec![true; 4]);

        // A depth-2 replica names levels 1-2 and implicitly includes 3-4.
        let partial = rs_of(vec![VirtualReplica::new("src1", path(&["C1", "P1"]))]);
        assert_eq!(presence_array(&partial, "src1", &s).unwrap(), vec![true; 4]);

        assert!(matches!(
            presence_array(&partial, "src9", &s),
            Err(Error::SourceNotInReplicaSet(_))
        ));
    }

    #[test]
    fn replicaset_serialization_round_trip() {
        let rs = ReplicaSet::create(
            "u1",
            vec![
                VirtualReplica::new("src1", path(&["C1", "P1"])),
                VirtualReplica::new("src2", path(&["C2"])),
            ],
        )
        .unwrap();
        let bytes = serialize_replicaset(&rs).unwrap();
        let back = deserialize_replicaset(&bytes).unwrap();
        assert_eq!(back, rs);
    }

    #[test]
    fn deserialize_rejects_empty_and_garbage() {
        let empty = rs_of(vec![]);
        let bytes = to_canonical_json(&empty);
        assert!(matches!(deserialize_replicaset(&bytes), Err(Error::Deserialize { .. })));

        match deserialize_replicaset(b"{not json") {
            Err(Error::Deserialize { offset, .. }) => assert!(offset <= 9),
            other => panic!("expected deserialize error, got {other:?}"),
        }
    }

    #[test]
    fn serialized_size_grows_linearly_per_entry() {
        // Fixed-width series ids so every replica has an identical byte cost.
        let make = |k: usize| {
            let replicas = (0..k)
                .map(|i| {
                    VirtualReplica::new(
                        "src1",
                        path(&["C1", "P1", "S1", &format!("SE{:04}", 1000 + i)]),
                    )
                })
                .collect();
            let rs = normalize_replicaset(rs_of(replicas)).unwrap();
            serialize_replicaset(&rs).unwrap().len()
        };
        let s8 = make(8);
        let s16 = make(16);
        let s24 = make(24);
        assert_eq!(s16 - s8, s24 - s16);
        assert_eq!((s16 - s8) % 8, 0);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        #[derive(Serialize)]
        struct Unsorted {
            zebra: u32,
            alpha: u32,
        }
        let bytes = to_canonical_json(&Unsorted { zebra: 1, alpha: 2 });
        assert_eq!(bytes, br#"{"alpha":2,"zebra":1}"#);
    }

    #[test]
    fn predicate_eval_rules() {
        let mut attrs = BTreeMap::new();
        attrs.insert("modality".to_string(), AttrValue::from("CT"));
        attrs.insert("num".to_string(), AttrValue::Int(42));

        let eq = Predicate { attribute: "modality".into(), op: PredicateOp::Eq, value: "CT".into() };
        assert!(eq.eval(&attrs));

        let contains =
            Predicate { attribute: "modality".into(), op: PredicateOp::Contains, value: "T".into() };
        assert!(contains.eval(&attrs));

        let lt = Predicate { attribute: "num".into(), op: PredicateOp::Lt, value: AttrValue::Int(50) };
        assert!(lt.eval(&attrs));

        // Int compares numerically against Float literals.
        let ge =
            Predicate { attribute: "num".into(), op: PredicateOp::Ge, value: AttrValue::Float(41.5) };
        assert!(ge.eval(&attrs));

        // Missing attribute fails every operator, != included.
        let missing =
            Predicate { attribute: "absent".into(), op: PredicateOp::Ne, value: "x".into() };
        assert!(!missing.eval(&attrs));

        // Type mismatch outside the numeric pairing fails.
        let mismatch =
            Predicate { attribute: "num".into(), op: PredicateOp::Eq, value: "42".into() };
        assert!(!mismatch.eval(&attrs));
    }

    #[test]
    fn record_validation() {
        let mut attrs = BTreeMap::new();
        attrs.insert("id".to_string(), AttrValue::from("S1"));
        let rec = MetadataRecord {
            path: path(&["C1", "P1", "S1"]),
            attributes: attrs.clone(),
            last_modified: 1,
            size_bytes: 10,
            blob_ref: None,
        };
        rec.validate().unwrap();

        let bad_size = MetadataRecord { size_bytes: 0, ..rec.clone() };
        assert!(bad_size.validate().is_err());

        let mut wrong = attrs.clone();
        wrong.insert("id".to_string(), AttrValue::from("S2"));
        let bad_id = MetadataRecord { attributes: wrong, ..rec.clone() };
        assert!(bad_id.validate().is_err());
    }

    #[test]
    fn content_hash_ignores_blob_ref() {
        let mut attrs = BTreeMap::new();
        attrs.insert("id".to_string(), AttrValue::from("I1"));
        let rec = MetadataRecord {
            path: path(&["C1", "P1", "S1", "SE1", "I1"]),
            attributes: attrs,
            last_modified: 5,
            size_bytes: 3,
            blob_ref: None,
        };
        let with_ref = MetadataRecord { blob_ref: Some("abc".into()), ..rec.clone() };
        assert_eq!(rec.content_hash(), with_ref.content_hash());
    }

    // Property tests over randomly generated replica sets.

    fn arb_path() -> impl Strategy<Value = EntryPath> {
        (0usize..=4, proptest::collection::vec(1u8..=3, 4)).prop_map(|(depth, picks)| {
            let s = schema();
            let ids: Vec<String> = ["C", "P", "S", "SE"]
                .iter()
                .zip(picks)
                .take(depth)
                .map(|(prefix, pick)| format!("{prefix}{pick}"))
                .collect();
            EntryPath::from_ids(&s, &ids).unwrap()
        })
    }

    fn arb_replicas() -> impl Strategy<Value = Vec<VirtualReplica>> {
        proptest::collection::vec(
            (prop_oneof![Just("src1"), Just("src2")], arb_path())
                .prop_map(|(s, p)| VirtualReplica::new(s, p)),
            1..12,
        )
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(replicas in arb_replicas()) {
            let once = normalize_replicaset(rs_of(replicas)).unwrap();
            let twice = normalize_replicaset(once.clone()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn covers_is_monotone(replicas in arb_replicas(), extra in arb_replicas(), p in arb_path()) {
            let small = normalize_replicaset(rs_of(replicas.clone())).unwrap();
            let mut all = replicas;
            all.extend(extra);
            let big = normalize_replicaset(rs_of(all)).unwrap();
            if covers(&small, "src1", &p) {
                prop_assert!(covers(&big, "src1", &p));
            }
        }

        #[test]
        fn round_trip_is_identity_on_normalized(replicas in arb_replicas()) {
            let rs = normalize_replicaset(rs_of(replicas)).unwrap();
            let bytes = serialize_replicaset(&rs).unwrap();
            prop_assert_eq!(deserialize_replicaset(&bytes).unwrap(), rs);
        }
    }
}
