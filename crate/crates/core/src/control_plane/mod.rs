//! The control plane: owns policy, revocations and the kill switch, serves
//! versioned snapshots to gateways, and ingests access logs.
//!
//! All mutations go through one writer and are persisted before the HTTP
//! response. Reads see the last committed snapshot.

pub mod client;
mod logs;
mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use logs::{newest_first, LimitTooLarge, LogQuery, LogStore, StoredLog, DEFAULT_QUERY_LIMIT, LOG_RING_CAPACITY, MAX_QUERY_LIMIT};
pub use store::{HistoryEntry, InitialSettings, PolicyStore, StoreError, StoreState};

use crate::clock::SharedClock;
use crate::observe::AccessLogRecord;
use crate::policy::{parse_etag, FieldError, PolicySnapshot, RoutePolicy};

pub const ACTOR_HEADER: &str = "x-actor";
pub const MAX_LOG_BATCH: usize = 1_000;
const BODY_LIMIT: usize = 32 * 1024 * 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlPlaneConfig {
    pub listen: SocketAddr,
    pub state_path: PathBuf,
    pub log_store_path: PathBuf,
    pub admin_token: String,
    /// Read-only token for gateways: policy fetch and log ingest.
    #[serde(default)]
    pub gateway_token: Option<String>,
    /// Empty allows any origin.
    #[serde(default)]
    pub cors_origins: Vec<String>,
    #[serde(default)]
    pub initial: InitialSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationAck {
    pub version: u64,
}

struct Shared {
    writer: Mutex<PolicyStore>,
    published: RwLock<Arc<PolicySnapshot>>,
    logs: std::sync::Mutex<LogStore>,
    admin_token: String,
    gateway_token: Option<String>,
    clock: SharedClock,
}

/// Cheaply clonable handle to control-plane state.
#[derive(Clone)]
pub struct ControlPlaneState(Arc<Shared>);

impl std::fmt::Debug for ControlPlaneState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPlaneState")
            .field("version", &self.snapshot().version)
            .finish_non_exhaustive()
    }
}

impl ControlPlaneState {
    pub fn new(
        store: PolicyStore,
        logs: LogStore,
        admin_token: String,
        gateway_token: Option<String>,
        clock: SharedClock,
    ) -> Self {
        let published = RwLock::new(Arc::new(store.current().clone()));
        Self(Arc::new(Shared {
            writer: Mutex::new(store),
            published,
            logs: std::sync::Mutex::new(logs),
            admin_token,
            gateway_token,
            clock,
        }))
    }

    /// Opens the state file and log store named in `config`.
    pub fn open(config: &ControlPlaneConfig, clock: SharedClock) -> anyhow::Result<Self> {
        let store = PolicyStore::open(&config.state_path, config.initial, clock.now())?;
        let logs = LogStore::open(&config.log_store_path, LOG_RING_CAPACITY)?;
        Ok(Self::new(
            store,
            logs,
            config.admin_token.clone(),
            config.gateway_token.clone(),
            clock,
        ))
    }

    pub fn snapshot(&self) -> Arc<PolicySnapshot> {
        self.0.published.read().unwrap().clone()
    }

    pub async fn history(&self) -> Vec<HistoryEntry> {
        self.0.writer.lock().await.history().to_vec()
    }

    pub fn log_count(&self) -> usize {
        self.0.logs.lock().unwrap().len()
    }

    pub fn query_logs(&self, q: &LogQuery) -> Result<Vec<StoredLog>, logs::LimitTooLarge> {
        self.0.logs.lock().unwrap().query(q)
    }

    async fn mutate(
        &self,
        f: impl FnOnce(&mut PolicyStore, chrono::DateTime<chrono::Utc>) -> Result<u64, StoreError>,
    ) -> Result<u64, StoreError> {
        let mut store = self.0.writer.lock().await;
        let version = f(&mut store, self.0.clock.now())?;
        *self.0.published.write().unwrap() = Arc::new(store.current().clone());
        Ok(version)
    }

    pub async fn set_kill_switch(&self, enabled: bool, actor: &str) -> Result<u64, StoreError> {
        self.mutate(|s, now| s.set_kill_switch(enabled, actor, now)).await
    }

    pub async fn upsert_route(&self, route: RoutePolicy, actor: &str) -> Result<u64, StoreError> {
        self.mutate(|s, now| s.upsert_route(route, actor, now)).await
    }

    pub async fn add_revocation(&self, fingerprint: &str, reason: &str, actor: &str) -> Result<u64, StoreError> {
        self.mutate(|s, now| s.add_revocation(fingerprint, reason, actor, now))
            .await
    }

    pub fn ingest_logs(&self, batch: Vec<AccessLogRecord>) -> std::io::Result<usize> {
        let now = self.0.clock.now();
        self.0.logs.lock().unwrap().ingest(batch, now)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Access {
    Admin,
    Gateway,
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn constant_time_eq(a: &str, b: &str) -> bool {
    use sha2::{Digest, Sha256};
    let (x, y) = (Sha256::digest(a.as_bytes()), Sha256::digest(b.as_bytes()));
    x.iter().zip(y.iter()).fold(0u8, |acc, (p, q)| acc | (p ^ q)) == 0
}

#[allow(clippy::result_large_err)]
fn authorize(state: &ControlPlaneState, headers: &HeaderMap, need: Access) -> Result<(), Response> {
    let Some(token) = bearer(headers) else {
        return Err(error(StatusCode::UNAUTHORIZED, "missing bearer token"));
    };
    let admin = constant_time_eq(token, &state.0.admin_token);
    let gateway = state
        .0
        .gateway_token
        .as_deref()
        .is_some_and(|g| constant_time_eq(token, g));
    match (need, admin, gateway) {
        (_, true, _) | (Access::Gateway, _, true) => Ok(()),
        (Access::Admin, false, true) => Err(error(StatusCode::FORBIDDEN, "admin token required")),
        _ => Err(error(StatusCode::UNAUTHORIZED, "invalid bearer token")),
    }
}

fn actor(headers: &HeaderMap) -> String {
    headers
        .get(ACTOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.is_empty())
        .unwrap_or("admin")
        .to_string()
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

fn unprocessable(errors: Vec<FieldError>) -> Response {
    (
        StatusCode::UNPROCESSABLE_ENTITY,
        Json(serde_json::json!({ "errors": errors })),
    )
        .into_response()
}

fn store_result(r: Result<u64, StoreError>) -> Response {
    match r {
        Ok(version) => Json(MutationAck { version }).into_response(),
        Err(StoreError::Invalid(errors)) => unprocessable(errors),
        Err(e) => {
            tracing::error!(error = %e, "policy store write failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, "state persistence failed")
        }
    }
}

#[allow(clippy::result_large_err)]
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| unprocessable(vec![FieldError::new("body", e.to_string())]))
}

async fn health(State(state): State<ControlPlaneState>) -> Response {
    Json(serde_json::json!({ "status": "ok", "version": state.snapshot().version })).into_response()
}

async fn get_policy(State(state): State<ControlPlaneState>, headers: HeaderMap) -> Response {
    if let Err(r) = authorize(&state, &headers, Access::Gateway) {
        return r;
    }
    let snapshot = state.snapshot();
    let etag = HeaderValue::from_str(&snapshot.etag()).expect("etag is ascii");
    let cached = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .and_then(parse_etag);
    if cached == Some(snapshot.version) {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag)]).into_response();
    }
    (
        StatusCode::OK,
        [
            (header::ETAG, etag),
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
        ],
        snapshot.to_canonical_json(),
    )
        .into_response()
}

#[derive(Deserialize)]
struct KillSwitchRequest {
    enabled: bool,
}

async fn post_killswitch(State(state): State<ControlPlaneState>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = authorize(&state, &headers, Access::Admin) {
        return r;
    }
    let req: KillSwitchRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    store_result(state.set_kill_switch(req.enabled, &actor(&headers)).await)
}

async fn put_route(
    State(state): State<ControlPlaneState>,
    UrlPath(host): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    if let Err(r) = authorize(&state, &headers, Access::Admin) {
        return r;
    }
    let route: RoutePolicy = match parse_body(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let mut errors = route.validate();
    if route.host != host {
        errors.insert(0, FieldError::new("host", "must match the path host"));
    }
    if !errors.is_empty() {
        return unprocessable(errors);
    }
    store_result(state.upsert_route(route, &actor(&headers)).await)
}

#[derive(Deserialize)]
struct RevocationRequest {
    fingerprint: String,
    #[serde(default)]
    reason: String,
}

async fn post_revocation(State(state): State<ControlPlaneState>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = authorize(&state, &headers, Access::Admin) {
        return r;
    }
    let req: RevocationRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    store_result(
        state
            .add_revocation(&req.fingerprint, &req.reason, &actor(&headers))
            .await,
    )
}

async fn post_logs(State(state): State<ControlPlaneState>, headers: HeaderMap, body: Bytes) -> Response {
    if let Err(r) = authorize(&state, &headers, Access::Gateway) {
        return r;
    }
    let batch: Vec<AccessLogRecord> = match parse_body(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    if batch.len() > MAX_LOG_BATCH {
        return error(StatusCode::PAYLOAD_TOO_LARGE, "batch exceeds 1000 records");
    }
    match state.ingest_logs(batch) {
        Ok(accepted) => Json(serde_json::json!({ "accepted": accepted })).into_response(),
        Err(e) => {
            tracing::error!(error = %e, "log store append failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, "log store append failed")
        }
    }
}

async fn get_logs(
    State(state): State<ControlPlaneState>,
    headers: HeaderMap,
    query: Result<Query<LogQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    if let Err(r) = authorize(&state, &headers, Access::Admin) {
        return r;
    }
    let Ok(Query(q)) = query else {
        return error(StatusCode::BAD_REQUEST, "malformed query");
    };
    match state.query_logs(&q) {
        Ok(rows) => Json(rows).into_response(),
        Err(logs::LimitTooLarge(n)) => error(
            StatusCode::BAD_REQUEST,
            &format!("limit {n} exceeds {MAX_QUERY_LIMIT}"),
        ),
    }
}

fn cors(origins: &[String]) -> CorsLayer {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::PUT])
        .allow_headers([
            header::AUTHORIZATION,
            header::CONTENT_TYPE,
            header::IF_NONE_MATCH,
            header::HeaderName::from_static(ACTOR_HEADER),
        ])
        .expose_headers([header::ETAG])
}

pub fn router(state: ControlPlaneState, cors_origins: &[String]) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/policy", get(get_policy))
        .route("/v1/killswitch", post(post_killswitch))
        .route("/v1/routes/{host}", put(put_route))
        .route("/v1/revocations", post(post_revocation))
        .route("/v1/logs", post(post_logs).get(get_logs))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(cors(cors_origins))
        .with_state(state)
}

/// A running axum listener with graceful stop.
#[derive(Debug)]
pub struct HttpServer {
    addr: SocketAddr,
    shutdown: tokio_util::sync::CancellationToken,
    task: Option<tokio::task::JoinHandle<()>>,
}

impl HttpServer {
    pub async fn bind(addr: SocketAddr, app: Router) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        Ok(Self::start(listener, app))
    }

    pub fn start(listener: TcpListener, app: Router) -> Self {
        let addr = listener.local_addr().expect("bound listener");
        let shutdown = tokio_util::sync::CancellationToken::new();
        let signal = shutdown.clone();
        let task = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(signal.cancelled_owned());
            if let Err(e) = serve.await {
                tracing::error!(error = %e, "control plane server failed");
            }
        });
        Self {
            addr,
            shutdown,
            task: Some(task),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting, closes connections and waits for the listener to drop.
    pub async fn stop(mut self) {
        self.shutdown.cancel();
        let Some(task) = self.task.take() else { return };
        let abort = task.abort_handle();
        if tokio::time::timeout(std::time::Duration::from_secs(2), task)
            .await
            .is_err()
        {
            abort.abort();
        }
    }

    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown.cancel();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use chrono::DateTime;

    fn state() -> ControlPlaneState {
        let now = DateTime::from_timestamp(1_760_000_000, 0).unwrap();
        ControlPlaneState::new(
            PolicyStore::in_memory(InitialSettings::default(), now),
            LogStore::in_memory(1000),
            "admin-secret".into(),
            Some("gw-secret".into()),
            Arc::new(ManualClock::new(now)),
        )
    }

    async fn serve() -> (HttpServer, ControlPlaneState) {
        let st = state();
        let server = HttpServer::bind("127.0.0.1:0".parse().unwrap(), router(st.clone(), &[]))
            .await
            .unwrap();
        (server, st)
    }

    #[tokio::test]
    async fn etag_and_not_modified() {
        let (server, st) = serve().await;
        st.set_kill_switch(false, "t").await.unwrap();
        st.set_kill_switch(false, "t").await.unwrap();
        let http = reqwest::Client::new();
        let url = format!("{}/v1/policy", server.url());
        let r = http.get(&url).bearer_auth("gw-secret").send().await.unwrap();
        assert_eq!(r.status(), 200);
        assert_eq!(r.headers()["etag"], "\"3\"");
        let r = http
            .get(&url)
            .bearer_auth("gw-secret")
            .header("if-none-match", "\"3\"")
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 304);
        let r = http
            .get(&url)
            .bearer_auth("gw-secret")
            .header("if-none-match", "\"2\"")
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 200);
        server.stop().await;
    }

    #[tokio::test]
    async fn mutations_require_admin() {
        let (server, _) = serve().await;
        let http = reqwest::Client::new();
        let url = format!("{}/v1/killswitch", server.url());
        let body = serde_json::json!({ "enabled": true });
        assert_eq!(http.post(&url).json(&body).send().await.unwrap().status(), 401);
        let r = http.post(&url).bearer_auth("gw-secret").json(&body).send().await.unwrap();
        assert_eq!(r.status(), 403);
        let r = http.post(&url).bearer_auth("admin-secret").json(&body).send().await.unwrap();
        assert_eq!(r.status(), 200);
        assert_eq!(r.json::<MutationAck>().await.unwrap().version, 2);
        server.stop().await;
    }

    #[tokio::test]
    async fn client_round_trip() {
        let (server, st) = serve().await;
        let admin = client::ControlPlaneClient::new(&server.url(), Some("admin-secret".into()))
            .unwrap()
            .with_actor("tester");
        let ack = admin.add_revocation(&"f".repeat(64), "lost").await.unwrap();
        assert_eq!(ack.version, 2);
        let err = admin.add_revocation("nothex", "x").await.unwrap_err();
        assert_eq!(err.status(), Some(422));
        let history = st.history().await;
        assert_eq!(history.last().unwrap().actor, "tester");
        match admin.fetch_policy(Some(1)).await.unwrap() {
            client::PolicyFetch::Modified(s) => assert!(s.revoked_fingerprints.contains(&"f".repeat(64))),
            other => panic!("{other:?}"),
        }
        assert!(matches!(admin.fetch_policy(Some(2)).await.unwrap(), client::PolicyFetch::NotModified));
        server.stop().await;
    }

    #[tokio::test]
    async fn oversize_log_batch_is_413() {
        let (server, _) = serve().await;
        let gw = client::ControlPlaneClient::new(&server.url(), Some("gw-secret".into())).unwrap();
        let rec = AccessLogRecord {
            timestamp: DateTime::from_timestamp(1_760_000_000, 0).unwrap(),
            gateway_id: "gw".into(),
            sequence: 0,
            fingerprint: None,
            user_id: None,
            source_ip: "127.0.0.1".parse().unwrap(),
            host: "h".into(),
            path: "/".into(),
            outcome: crate::observe::LogOutcome::Error,
            reason: "handshake_no_client_cert".into(),
            policy_version: None,
            latency_us: 0,
        };
        let batch: Vec<_> = (0..1001)
            .map(|i| AccessLogRecord { sequence: i, ..rec.clone() })
            .collect();
        assert!(matches!(gw.post_logs(&batch).await, Err(client::LogPostError::Status(413))));
        assert_eq!(gw.post_logs(&batch[..10]).await.unwrap(), 10);
        assert_eq!(gw.post_logs(&batch[..10]).await.unwrap(), 0);
        server.stop().await;
    }
}
