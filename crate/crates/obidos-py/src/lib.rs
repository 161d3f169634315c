//! Python bindings: `Instance` wraps one engine instance; module functions
//! cover corpus generation. Reports, outcomes, and replicasets cross the
//! boundary as plain dicts/lists/scalars.

use pyo3::exceptions::{PyKeyError, PyOSError, PyPermissionError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};
use pyo3::IntoPyObjectExt;

use obidos::error::Error;
use obidos::etl::Engine;
use obidos::model::{
    AttrValue, EntryPath, Predicate, ReplicaSetId, UserQuery, VirtualReplica,
};
use obidos::service::HttpSender;
use obidos::sharing::ShareEnvelope;
use obidos::source::{
    generate_synthetic_source, FsConnector, GeneratorParams, MetadataProfile,
};

fn to_py_err(e: Error) -> PyErr {
    match &e {
        Error::UnknownReplicaSet(_) | Error::PathNotFound(_) | Error::BlobNotFound(_) => {
            PyKeyError::new_err(e.to_string())
        }
        Error::AccessDenied(_) => PyPermissionError::new_err(e.to_string()),
        Error::SourceUnavailable(_) | Error::SenderUnavailable(_) | Error::Io(_) => {
            PyOSError::new_err(e.to_string())
        }
        Error::InvalidReplicaSet(_)
        | Error::InvalidPath(_)
        | Error::InvalidQuery(_)
        | Error::InvalidRecord(_)
        | Error::InvalidSchema(_)
        | Error::DuplicateReplicaSet(_)
        | Error::Deserialize { .. }
        | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match value {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn serialize_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn scalar_from_py(value: &Bound<'_, PyAny>) -> PyResult<AttrValue> {
    if value.is_instance_of::<PyBool>() {
        return Err(PyValueError::new_err("attribute scalars are str, int, or float"));
    }
    if let Ok(i) = value.extract::<i64>() {
        return Ok(AttrValue::Int(i));
    }
    if let Ok(f) = value.extract::<f64>() {
        return Ok(AttrValue::Float(f));
    }
    if let Ok(s) = value.extract::<String>() {
        return Ok(AttrValue::Str(s));
    }
    Err(PyValueError::new_err("attribute scalars are str, int, or float"))
}

fn parse_id(text: &str) -> PyResult<ReplicaSetId> {
    text.parse::<ReplicaSetId>().map_err(to_py_err)
}

/// Generate a deterministic synthetic source tree on disk.
///
/// `counts` are children per level, leaf last:
/// collections, patients, studies, series, images.
#[pyfunction]
#[pyo3(signature = (path, source_id, seed=1, counts=vec![2, 2, 2, 2, 2], image_size_bytes=4096, pad_bytes=0))]
fn generate_source(
    path: &str,
    source_id: &str,
    seed: u64,
    counts: Vec<usize>,
    image_size_bytes: usize,
    pad_bytes: usize,
) -> PyResult<()> {
    let params = GeneratorParams {
        source_id: source_id.to_string(),
        seed,
        counts,
        image_size_bytes,
        profile: MetadataProfile { pad_bytes },
    };
    generate_synthetic_source(std::path::Path::new(path), &params).map_err(to_py_err)
}

/// One engine instance over a persistent directory and a set of sources.
#[pyclass]
struct Instance {
    engine: Engine,
}

#[pymethods]
impl Instance {
    #[new]
    #[pyo3(signature = (dir, sources, instance_id=None))]
    fn new(dir: &str, sources: Vec<String>, instance_id: Option<String>) -> PyResult<Self> {
        let mut connectors: Vec<Box<dyn obidos::source::Connector>> = Vec::new();
        for root in &sources {
            connectors.push(Box::new(FsConnector::open(root).map_err(to_py_err)?));
        }
        let mut engine = Engine::open(dir, connectors).map_err(to_py_err)?;
        if let Some(id) = instance_id {
            engine.set_instance_id(id);
        }
        Ok(Instance { engine })
    }

    fn source_ids(&self) -> Vec<String> {
        self.engine.source_ids()
    }

    /// Register a replicaset from (source_id, path) pointers; an empty path
    /// points at the whole source. Returns the replicaset id (32-char hex).
    fn create_replicaset(&mut self, owner: &str, replicas: Vec<(String, String)>) -> PyResult<String> {
        let mut parsed = Vec::new();
        for (source_id, text) in &replicas {
            let conn = self.engine.connector(source_id).map_err(to_py_err)?;
            let path = EntryPath::parse(conn.schema(), text).map_err(to_py_err)?;
            parsed.push(VirtualReplica::new(source_id.clone(), path));
        }
        let rs = self.engine.create_replicaset(owner, parsed, None).map_err(to_py_err)?;
        Ok(rs.replicaset_id.to_string())
    }

    fn get_replicaset(&self, py: Python<'_>, replicaset_id: &str) -> PyResult<Py<PyAny>> {
        let id = parse_id(replicaset_id)?;
        let rs = self.engine.holder().resolve(&id).map_err(to_py_err)?;
        serialize_to_py(py, rs)
    }

    fn delete_replicaset(&mut self, user: &str, replicaset_id: &str) -> PyResult<()> {
        let id = parse_id(replicaset_id)?;
        self.engine.delete_replicaset(user, &id).map_err(to_py_err)
    }

    /// Mirror the pointed subtrees as virtual proxies (no query). Returns a
    /// dict with `report` and `outcome`.
    fn load(&mut self, py: Python<'_>, replicaset_id: &str) -> PyResult<Py<PyAny>> {
        let id = parse_id(replicaset_id)?;
        let loaded = self.engine.selective_load(&id, None).map_err(|a| to_py_err(a.error))?;
        serialize_to_py(py, &loaded)
    }

    /// Run the selective load for a query. Predicates are
    /// (attribute, op, value) tuples with op one of
    /// `=  !=  <  <=  >  >=  contains`.
    #[pyo3(signature = (replicaset_id, target_level, predicates=None, include_binary=false))]
    fn query(
        &mut self,
        py: Python<'_>,
        replicaset_id: &str,
        target_level: &str,
        predicates: Option<Vec<(String, String, Bound<'_, PyAny>)>>,
        include_binary: bool,
    ) -> PyResult<Py<PyAny>> {
        let id = parse_id(replicaset_id)?;
        let mut parsed = Vec::new();
        for (attribute, op, value) in predicates.unwrap_or_default() {
            parsed.push(Predicate {
                attribute,
                op: op.parse().map_err(to_py_err)?,
                value: scalar_from_py(&value)?,
            });
        }
        let query = UserQuery {
            target_level: target_level.to_string(),
            predicates: parsed,
            include_binary,
        };
        let loaded =
            self.engine.selective_load(&id, Some(&query)).map_err(|a| to_py_err(a.error))?;
        serialize_to_py(py, &loaded)
    }

    /// Check the sources for updated records under a loaded replicaset.
    fn refresh(&mut self, py: Python<'_>, replicaset_id: &str) -> PyResult<Py<PyAny>> {
        let id = parse_id(replicaset_id)?;
        let report = self.engine.refresh(&id).map_err(to_py_err)?;
        serialize_to_py(py, &report)
    }

    /// Collect repository data referenced by no live replicaset.
    fn gc(&mut self) -> PyResult<usize> {
        self.engine.gc().map_err(to_py_err)
    }

    /// Load everything from every registered source (baseline).
    fn eager_etl(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let sources = self.engine.source_ids();
        let report = self.engine.eager_etl(&sources).map_err(to_py_err)?;
        serialize_to_py(py, &report)
    }

    /// Load all metadata and nothing else (baseline).
    fn lazy_bootstrap(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let sources = self.engine.source_ids();
        let report = self.engine.lazy_etl_bootstrap(&sources).map_err(to_py_err)?;
        serialize_to_py(py, &report)
    }

    /// Build a share envelope (JSON text) for a receiver.
    #[pyo3(signature = (replicaset_id, receiver_user, sender_uri="", with_access=false, grant_ttl_millis=86_400_000, full=false))]
    fn export_envelope(
        &mut self,
        replicaset_id: &str,
        receiver_user: &str,
        sender_uri: &str,
        with_access: bool,
        grant_ttl_millis: i64,
        full: bool,
    ) -> PyResult<String> {
        let id = parse_id(replicaset_id)?;
        let envelope = self
            .engine
            .export_envelope(&id, receiver_user, sender_uri, with_access, grant_ttl_millis, full)
            .map_err(to_py_err)?;
        Ok(String::from_utf8(envelope.to_bytes()).expect("canonical JSON is UTF-8"))
    }

    /// Import a share envelope (JSON text). Id-only envelopes from another
    /// instance are resolved over HTTP against the sender URI.
    fn import_envelope(&mut self, py: Python<'_>, envelope_json: &str) -> PyResult<Py<PyAny>> {
        let envelope = ShareEnvelope::from_bytes(envelope_json.as_bytes()).map_err(to_py_err)?;
        let result =
            self.engine.share_replicaset(&envelope, &HttpSender::new()).map_err(to_py_err)?;
        serialize_to_py(py, &result)
    }

    /// Cumulative per-source traffic counters.
    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let dict = PyDict::new(py);
        for source_id in self.engine.source_ids() {
            let stats = self.engine.connector(&source_id).map_err(to_py_err)?.stats();
            dict.set_item(source_id, serialize_to_py(py, &stats)?)?;
        }
        dict.into_py_any(py)
    }

    /// (total entries, full records, proxies) currently in the repository.
    fn entry_counts(&self) -> (usize, usize, usize) {
        let repo = self.engine.repo();
        (repo.entry_count(), repo.full_count(), repo.proxy_count())
    }
}

#[pymodule]
fn obidos_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Instance>()?;
    m.add_function(wrap_pyfunction!(generate_source, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
