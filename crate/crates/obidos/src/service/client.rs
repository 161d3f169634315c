//! Blocking HTTP client for the service API: used by the CLI and as the
//! transport behind cross-instance sharing.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{ReplicaSet, ReplicaSetId, UserQuery};
use crate::repository::QueryOutcome;
use crate::sharing::SenderApi;

pub struct ApiClient {
    base: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

fn http_client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(600))
        .build()
        .expect("reqwest client")
}

fn io_err(e: reqwest::Error) -> Error {
    Error::SenderUnavailable(e.to_string())
}

/// Maps a non-success response to the closest crate error.
fn check(resp: reqwest::blocking::Response) -> Result<Value> {
    let status = resp.status();
    let body: Value = resp.json().unwrap_or_else(|_| json!({}));
    if status.is_success() {
        return Ok(body);
    }
    let message = body
        .get("error")
        .and_then(Value::as_str)
        .unwrap_or_else(|| status.as_str())
        .to_string();
    Err(match status.as_u16() {
        401 | 403 => Error::AccessDenied(message),
        404 => Error::UnknownReplicaSet(message),
        409 => Error::DuplicateReplicaSet(message),
        422 => Error::InvalidReplicaSet(message),
        _ => Error::ShareFailed(message),
    })
}

impl ApiClient {
    pub fn new(base: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), api_key: api_key.into(), http: http_client() }
    }

    fn post(&self, path: &str, body: Value) -> Result<Value> {
        let resp = self
            .http
            .post(format!("{}{}", self.base, path))
            .header("x-api-key", &self.api_key)
            .json(&body)
            .send()
            .map_err(io_err)?;
        check(resp)
    }

    pub fn create_replicaset(&self, replicas: &[(String, String)], query: Option<Value>) -> Result<Value> {
        let replicas: Vec<Value> = replicas
            .iter()
            .map(|(source_id, path)| json!({ "source_id": source_id, "path": path }))
            .collect();
        let mut body = json!({ "replicas": replicas });
        if let Some(q) = query {
            body["query"] = q;
        }
        self.post("/replicasets", body)
    }

    pub fn get_replicaset(&self, id: &str) -> Result<Value> {
        let resp = self
            .http
            .get(format!("{}/replicasets/{id}", self.base))
            .header("x-api-key", &self.api_key)
            .send()
            .map_err(io_err)?;
        check(resp)
    }

    pub fn update_replicaset(&self, id: &str, replicas: &[(String, String)]) -> Result<Value> {
        let replicas: Vec<Value> = replicas
            .iter()
            .map(|(source_id, path)| json!({ "source_id": source_id, "path": path }))
            .collect();
        let resp = self
            .http
            .put(format!("{}/replicasets/{id}", self.base))
            .header("x-api-key", &self.api_key)
            .json(&json!({ "replicas": replicas }))
            .send()
            .map_err(io_err)?;
        check(resp)
    }

    pub fn delete_replicaset(&self, id: &str) -> Result<()> {
        let resp = self
            .http
            .delete(format!("{}/replicasets/{id}", self.base))
            .header("x-api-key", &self.api_key)
            .send()
            .map_err(io_err)?;
        if resp.status().is_success() {
            Ok(())
        } else {
            check(resp).map(|_| ())
        }
    }

    pub fn query(&self, replicaset_id: &str, query: Value, force_load: bool) -> Result<Value> {
        self.post(
            "/query",
            json!({ "replicaset_id": replicaset_id, "query": query, "force_load": force_load }),
        )
    }

    pub fn share_export(
        &self,
        replicaset_id: &str,
        receiver_user: &str,
        with_access: bool,
        full: bool,
    ) -> Result<Value> {
        self.post(
            "/share/export",
            json!({
                "replicaset_id": replicaset_id,
                "receiver_user": receiver_user,
                "with_access": with_access,
                "full": full,
            }),
        )
    }

    pub fn share_import(&self, envelope: &Value) -> Result<Value> {
        self.post("/share", envelope.clone())
    }

    pub fn gc(&self) -> Result<Value> {
        self.post("/gc", json!({}))
    }
}

/// Sender-instance transport over HTTP.
pub struct HttpSender {
    http: reqwest::blocking::Client,
}

impl HttpSender {
    pub fn new() -> Self {
        Self { http: http_client() }
    }
}

impl Default for HttpSender {
    fn default() -> Self {
        Self::new()
    }
}

impl SenderApi for HttpSender {
    fn get_replicaset(&self, sender_uri: &str, id: &ReplicaSetId) -> Result<ReplicaSet> {
        let base = sender_uri.trim_end_matches('/');
        let resp = self
            .http
            .get(format!("{base}/shared/{id}"))
            .send()
            .map_err(|e| Error::SenderUnavailable(e.to_string()))?;
        let body = check(resp)?;
        serde_json::from_value(body).map_err(|e| Error::ShareFailed(format!("bad replicaset body: {e}")))
    }

    fn remote_query(
        &self,
        sender_uri: &str,
        api_key: &str,
        id: &ReplicaSetId,
        query: &UserQuery,
    ) -> Result<QueryOutcome> {
        let base = sender_uri.trim_end_matches('/');
        let body = json!({
            "replicaset_id": id.to_string(),
            "query": query,
        });
        let resp = self
            .http
            .post(format!("{base}/remote-query"))
            .header("x-api-key", api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::SenderUnavailable(e.to_string()))?;
        let body = check(resp)?;
        serde_json::from_value(body).map_err(|e| Error::ShareFailed(format!("bad remote outcome: {e}")))
    }
}
