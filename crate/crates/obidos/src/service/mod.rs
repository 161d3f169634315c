//! HTTP service: CRUD on replicasets, query, sharing, and gc endpoints with
//! API-key scoped authorization.
//!
//! Every stateful endpoint authenticates an `X-Api-Key` header against the
//! configured keys before touching engine state. Two endpoints use other
//! capabilities instead: `GET /shared/{id}` serves exported replicaset
//! definitions (possession of the 128-bit id is the capability) and
//! `POST /remote-query` authenticates a sharing grant key.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as AxumPath, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Error;
use crate::etl::{Engine, LoadReport};
use crate::model::{
    AttrValue, EntryPath, Predicate, ReplicaSet, ReplicaSetId, UserQuery, VirtualReplica,
};
use crate::repository::QueryOutcome;
use crate::sharing::{ShareEnvelope, ShareResult};

pub mod client;

pub use client::{ApiClient, HttpSender};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Mutex<Engine>>,
    /// api key -> user id
    pub keys: Arc<HashMap<String, String>>,
    pub public_uri: String,
}

impl AppState {
    pub fn new(engine: Engine, keys: HashMap<String, String>, public_uri: String) -> Self {
        Self { engine: Arc::new(Mutex::new(engine)), keys: Arc::new(keys), public_uri }
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownReplicaSet(_) | Error::PathNotFound(_) | Error::BlobNotFound(_) => {
                StatusCode::NOT_FOUND
            }
            Error::DuplicateReplicaSet(_) => StatusCode::CONFLICT,
            Error::AccessDenied(_) => StatusCode::FORBIDDEN,
            Error::InvalidReplicaSet(_)
            | Error::InvalidPath(_)
            | Error::InvalidQuery(_)
            | Error::InvalidRecord(_)
            | Error::InvalidSchema(_)
            | Error::Deserialize { .. }
            | Error::SourceNotInReplicaSet(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::SourceUnavailable(_) | Error::SenderUnavailable(_) | Error::ShareFailed(_) => {
                StatusCode::BAD_GATEWAY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn require_user(state: &AppState, headers: &HeaderMap) -> Result<String, ApiError> {
    let key = headers
        .get("x-api-key")
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing X-Api-Key"))?;
    state
        .keys
        .get(key)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown api key"))
}

fn grant_key(headers: &HeaderMap) -> Result<String, ApiError> {
    headers
        .get("x-api-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing X-Api-Key"))
}

fn require_holder_of(engine: &Engine, user: &str, id: &ReplicaSetId) -> Result<(), ApiError> {
    if engine.holder().owner_of(id).contains(&user) {
        Ok(())
    } else {
        // Unknown id and foreign id are indistinguishable to the caller.
        Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown replicaset: {id}")))
    }
}

// -- wire bodies --------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ReplicaBody {
    source_id: String,
    /// Slash-separated entry ids; empty string points at the whole source.
    path: String,
}

#[derive(Debug, Deserialize)]
struct PredicateBody {
    attribute: String,
    op: String,
    value: serde_json::Value,
}

#[derive(Debug, Deserialize)]
struct QueryBody {
    target_level: String,
    #[serde(default)]
    predicates: Vec<PredicateBody>,
    #[serde(default)]
    include_binary: bool,
}

impl QueryBody {
    fn into_query(self) -> Result<UserQuery, Error> {
        let mut predicates = Vec::new();
        for p in self.predicates {
            predicates.push(Predicate {
                attribute: p.attribute,
                op: p.op.parse()?,
                value: AttrValue::from_plain_json(&p.value)
                    .map_err(|e| Error::InvalidQuery(e.to_string()))?,
            });
        }
        Ok(UserQuery {
            target_level: self.target_level,
            predicates,
            include_binary: self.include_binary,
        })
    }
}

#[derive(Debug, Deserialize)]
struct CreateBody {
    replicas: Vec<ReplicaBody>,
    #[serde(default)]
    query: Option<QueryBody>,
    /// Client-chosen id for idempotent creates.
    #[serde(default)]
    replicaset_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct UpdateBody {
    replicas: Vec<ReplicaBody>,
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    replicaset_id: String,
    query: QueryBody,
    /// Escape hatch outside the selective algorithm: reload every replica.
    #[serde(default)]
    force_load: bool,
}

#[derive(Debug, Deserialize)]
struct ExportBody {
    replicaset_id: String,
    receiver_user: String,
    #[serde(default)]
    with_access: bool,
    /// Send the full replicaset instead of the id-only envelope.
    #[serde(default)]
    full: bool,
    #[serde(default = "default_grant_ttl")]
    grant_ttl_millis: i64,
}

fn default_grant_ttl() -> i64 {
    24 * 3600 * 1000
}

#[derive(Debug, Serialize)]
pub struct RowBody {
    pub source_id: String,
    pub path: String,
    pub attributes: BTreeMap<String, serde_json::Value>,
    pub last_modified: i64,
    pub size_bytes: u64,
    pub blob_ref: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct OutcomeBody {
    pub rows: Vec<RowBody>,
    pub complete: bool,
    pub blob_refs_resolved: bool,
}

impl From<QueryOutcome> for OutcomeBody {
    fn from(outcome: QueryOutcome) -> Self {
        let rows = outcome
            .rows
            .into_iter()
            .map(|row| RowBody {
                source_id: row.source_id,
                path: row.record.path.to_string(),
                attributes: row
                    .record
                    .attributes
                    .iter()
                    .map(|(k, v)| (k.clone(), v.to_plain_json()))
                    .collect(),
                last_modified: row.record.last_modified,
                size_bytes: row.record.size_bytes,
                blob_ref: row.record.blob_ref,
            })
            .collect();
        OutcomeBody {
            rows,
            complete: outcome.complete,
            blob_refs_resolved: outcome.blob_refs_resolved,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ReplicaSetBody {
    pub replicaset_id: String,
    pub owner_user_id: String,
    pub replicas: Vec<ReplicaOut>,
    pub created_at: i64,
    pub last_loaded_at: Option<i64>,
}

#[derive(Debug, Serialize)]
pub struct ReplicaOut {
    pub source_id: String,
    pub path: String,
}

impl From<&ReplicaSet> for ReplicaSetBody {
    fn from(rs: &ReplicaSet) -> Self {
        ReplicaSetBody {
            replicaset_id: rs.replicaset_id.to_string(),
            owner_user_id: rs.owner_user_id.clone(),
            replicas: rs
                .replicas
                .iter()
                .map(|r| ReplicaOut { source_id: r.source_id.clone(), path: r.path.to_string() })
                .collect(),
            created_at: rs.created_at,
            last_loaded_at: rs.last_loaded_at,
        }
    }
}

fn parse_id(text: &str) -> Result<ReplicaSetId, ApiError> {
    text.parse::<ReplicaSetId>().map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

fn parse_replicas(engine: &Engine, bodies: &[ReplicaBody]) -> Result<Vec<VirtualReplica>, Error> {
    let mut replicas = Vec::new();
    for body in bodies {
        let conn = engine.connector(&body.source_id)?;
        let path = EntryPath::parse(conn.schema(), &body.path)?;
        replicas.push(VirtualReplica::new(body.source_id.clone(), path));
    }
    Ok(replicas)
}

// -- handlers ------------------------------------------------------------------

async fn create_replicaset(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<CreateBody>,
) -> Result<Response, ApiError> {
    let user = require_user(&state, &headers)?;
    let out = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let mut engine = state.engine.lock().expect("engine lock");
        let id = body.replicaset_id.as_deref().map(parse_id).transpose()?;
        let replicas = parse_replicas(&engine, &body.replicas).map_err(ApiError::from)?;
        let query = body.query.map(|q| q.into_query()).transpose().map_err(ApiError::from)?;
        let rs = engine.create_replicaset(&user, replicas, id).map_err(ApiError::from)?;
        let loaded = engine
            .selective_load(&rs.replicaset_id, query.as_ref())
            .map_err(|aborted| ApiError::from(aborted.error))?;
        let rs = engine.holder().resolve(&rs.replicaset_id).map_err(ApiError::from)?.clone();
        Ok(json!({
            "replicaset": ReplicaSetBody::from(&rs),
            "report": loaded.report,
            "outcome": OutcomeBody::from(loaded.outcome),
        }))
    })
    .await
    .map_err(internal)??;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn get_replicaset(
    State(state): State<AppState>,
    headers: HeaderMap,
    AxumPath(id): AxumPath<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let user = require_user(&state, &headers)?;
    let out = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let mut engine = state.engine.lock().expect("engine lock");
        let id = parse_id(&id)?;
        require_holder_of(&engine, &user, &id)?;
        let rs = engine.holder().resolve(&id).map_err(ApiError::from)?.clone();
        // Retrieval triggers an update check once data was loaded before.
        let refresh: Option<LoadReport> = if rs.last_loaded_at.is_some() {
            Some(engine.refresh(&id).map_err(ApiError::from)?)
        } else {
            None
        };
        let rs = engine.holder().resolve(&id).map_err(ApiError::from)?.clone();
        Ok(json!({
            "replicaset": ReplicaSetBody::from(&rs),
            "loaded": rs.last_loaded_at.is_some(),
            "refresh": refresh,
        }))
    })
    .await
    .map_err(internal)??;
    Ok(Json(out))
}

async fn update_replicaset(
    State(state): State<AppState>,
    headers: HeaderMap,
    AxumPath(id): AxumPath<String>,
    Json(body): Json<UpdateBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let user = require_user(&state, &headers)?;
    let out = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let mut engine = state.engine.lock().expect("engine lock");
        let id = parse_id(&id)?;
        require_holder_of(&engine, &user, &id)?;
        let replicas = parse_replicas(&engine, &body.replicas).map_err(ApiError::from)?;
        engine.update_replicaset(&id, replicas).map_err(ApiError::from)?;
        // Load the additions; holder hits skip everything already loaded.
        let loaded =
            engine.selective_load(&id, None).map_err(|aborted| ApiError::from(aborted.error))?;
        let rs = engine.holder().resolve(&id).map_err(ApiError::from)?.clone();
        Ok(json!({
            "replicaset": ReplicaSetBody::from(&rs),
            "report": loaded.report,
        }))
    })
    .await
    .map_err(internal)??;
    Ok(Json(out))
}

async fn delete_replicaset(
    State(state): State<AppState>,
    headers: HeaderMap,
    AxumPath(id): AxumPath<String>,
) -> Result<StatusCode, ApiError> {
    let user = require_user(&state, &headers)?;
    tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let mut engine = state.engine.lock().expect("engine lock");
        let id = parse_id(&id)?;
        require_holder_of(&engine, &user, &id)?;
        engine.delete_replicaset(&user, &id).map_err(ApiError::from)?;
        Ok(())
    })
    .await
    .map_err(internal)??;
    Ok(StatusCode::NO_CONTENT)
}

async fn run_query(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<QueryRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let user = require_user(&state, &headers)?;
    let out = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let id = parse_id(&body.replicaset_id)?;
        let query = body.query.into_query().map_err(ApiError::from)?;

        // A replicaset bound to a sender's repository proxies the query.
        let binding = {
            let engine = state.engine.lock().expect("engine lock");
            engine.shares().binding(&id).cloned()
        };
        if let Some(binding) = binding {
            if binding.receiver_user == user {
                let engine = state.engine.lock().expect("engine lock");
                let outcome =
                    engine.remote_query(&id, &query, &HttpSender::new()).map_err(ApiError::from)?;
                return Ok(json!({
                    "outcome": OutcomeBody::from(outcome),
                    "remote": true,
                }));
            }
        }

        let mut engine = state.engine.lock().expect("engine lock");
        require_holder_of(&engine, &user, &id)?;
        let loaded = if body.force_load {
            engine.force_load(&id, Some(&query))
        } else {
            engine.selective_load(&id, Some(&query))
        }
        .map_err(|aborted| ApiError::from(aborted.error))?;
        Ok(json!({
            "outcome": OutcomeBody::from(loaded.outcome),
            "report": loaded.report,
            "remote": false,
        }))
    })
    .await
    .map_err(internal)??;
    Ok(Json(out))
}

async fn share_import(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(envelope): Json<ShareEnvelope>,
) -> Result<Json<ShareResult>, ApiError> {
    require_user(&state, &headers)?;
    let out = tokio::task::spawn_blocking(move || -> Result<ShareResult, ApiError> {
        let mut engine = state.engine.lock().expect("engine lock");
        engine.share_replicaset(&envelope, &HttpSender::new()).map_err(ApiError::from)
    })
    .await
    .map_err(internal)??;
    Ok(Json(out))
}

async fn share_export(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<ExportBody>,
) -> Result<Json<ShareEnvelope>, ApiError> {
    let user = require_user(&state, &headers)?;
    let out = tokio::task::spawn_blocking(move || -> Result<ShareEnvelope, ApiError> {
        let mut engine = state.engine.lock().expect("engine lock");
        let id = parse_id(&body.replicaset_id)?;
        require_holder_of(&engine, &user, &id)?;
        engine
            .export_envelope(
                &id,
                &body.receiver_user,
                &state.public_uri,
                body.with_access,
                body.grant_ttl_millis,
                body.full,
            )
            .map_err(ApiError::from)
    })
    .await
    .map_err(internal)??;
    Ok(Json(out))
}

async fn run_gc(
    State(state): State<AppState>,
    headers: HeaderMap,
) -> Result<Json<serde_json::Value>, ApiError> {
    require_user(&state, &headers)?;
    let removed = tokio::task::spawn_blocking(move || -> Result<usize, ApiError> {
        let mut engine = state.engine.lock().expect("engine lock");
        engine.gc().map_err(ApiError::from)
    })
    .await
    .map_err(internal)??;
    Ok(Json(json!({ "removed": removed })))
}

async fn get_shared(
    State(state): State<AppState>,
    AxumPath(id): AxumPath<String>,
) -> Result<Json<ReplicaSet>, ApiError> {
    let rs = tokio::task::spawn_blocking(move || -> Result<ReplicaSet, ApiError> {
        let engine = state.engine.lock().expect("engine lock");
        let id = parse_id(&id)?;
        engine.shared_replicaset(&id).map_err(ApiError::from)
    })
    .await
    .map_err(internal)??;
    Ok(Json(rs))
}

/// Instance-to-instance body: full-fidelity serde types, unlike the
/// operator-facing endpoints.
#[derive(Debug, Deserialize)]
struct RemoteQueryBody {
    replicaset_id: String,
    query: UserQuery,
}

async fn remote_query(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<RemoteQueryBody>,
) -> Result<Json<QueryOutcome>, ApiError> {
    let key = grant_key(&headers)?;
    let out = tokio::task::spawn_blocking(move || -> Result<QueryOutcome, ApiError> {
        let engine = state.engine.lock().expect("engine lock");
        let id = parse_id(&body.replicaset_id)?;
        let outcome = engine.answer_remote_query(&key, &id, &body.query).map_err(ApiError::from)?;
        Ok(outcome)
    })
    .await
    .map_err(internal)??;
    Ok(Json(out))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

/// Key check ahead of body extraction, so a missing or unknown key is a 401
/// before any request parsing or state access. Capability-authenticated
/// routes (`/shared/{id}`, `/remote-query`) and `/health` are exempt; the
/// remote-query grant key is validated against issued grants downstream.
async fn auth_layer(State(state): State<AppState>, request: Request, next: Next) -> Response {
    let path = request.uri().path();
    let exempt = path == "/health" || path == "/remote-query" || path.starts_with("/shared/");
    if !exempt {
        match require_user(&state, request.headers()) {
            Ok(_) => {}
            Err(e) => return e.into_response(),
        }
    }
    next.run(request).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/replicasets", post(create_replicaset))
        .route(
            "/replicasets/{id}",
            get(get_replicaset).put(update_replicaset).delete(delete_replicaset),
        )
        .route("/query", post(run_query))
        .route("/share", post(share_import))
        .route("/share/export", post(share_export))
        .route("/gc", post(run_gc))
        .route("/shared/{id}", get(get_shared))
        .route("/remote-query", post(remote_query))
        .layer(middleware::from_fn_with_state(state.clone(), auth_layer))
        .with_state(state)
}

/// Binds and serves until the process exits. The advertised public URI
/// (used inside share envelopes) defaults to the bound address, so an
/// ephemeral `listen` port still produces resolvable envelopes.
pub async fn serve_instance(
    engine: Engine,
    keys: HashMap<String, String>,
    public_uri: Option<String>,
    listen: &str,
) -> crate::error::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let public_uri = public_uri.unwrap_or_else(|| format!("http://{addr}"));
    let state = AppState::new(engine, keys, public_uri);
    eprintln!("listening on {addr}");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Serves an engine on an ephemeral localhost port from a background
/// thread. Returns the base URL and the shared state (tests inspect the
/// engine through it). The thread runs until the process exits.
pub fn spawn_server(
    engine: Engine,
    keys: HashMap<String, String>,
) -> crate::error::Result<(String, AppState)> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    listener.set_nonblocking(true)?;
    let base = format!("http://{}", listener.local_addr()?);
    let state = AppState::new(engine, keys, base.clone());
    let served = state.clone();
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            axum::serve(listener, router(served)).await.expect("serve");
        });
    });
    Ok((base, state))
}
