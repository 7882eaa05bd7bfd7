//! The request pipeline.
//!
//! Each accepted connection is TLS-terminated with a mandatory device
//! certificate. Each request then runs
//! sanitize → session → (SSO redirect) → staleness → evaluate → mint → forward,
//! and produces exactly one access record whatever the outcome.

mod headers;
mod tunnel;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use bytes::Bytes;
use http::header::{self, HeaderValue};
use http::{Method, Request, Response, StatusCode};
use http_body_util::combinators::BoxBody;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::service::service_fn;
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::{TokioExecutor, TokioIo};
use rustls::pki_types::{CertificateDer, PrivateKeyDer};
use tokio::net::{TcpListener, TcpStream};
use tokio_rustls::TlsAcceptor;
use tokio_util::sync::CancellationToken;

pub use headers::{
    forwarded_for, header_block_size, sanitize_inbound, strip_session_cookie, AUTH_SCHEME, RESERVED_PREFIX,
};
pub use tunnel::{tunnel_decision, TunnelGuard, TunnelRegistry};

use crate::authn::{
    check_session, check_session_id, handle_callback, initiate_sso, AuthnError, CallbackError, GeoDb, HttpIdpClient,
    IdpClient, IdpConfig, NoSession, Session, SessionStore, CALLBACK_PATH,
};
use crate::clock::SharedClock;
use crate::config::GatewayConfig;
use crate::control_plane::client::ControlPlaneClient;
use crate::observe::{
    run_shipper, AccessLogger, LogOutcome, RecordDraft, ShipQueue, ShipperStats, QUEUE_CAPACITY,
};
use crate::policy::{
    evaluate, poll_policy, AccessDecision, Freshness, PolicyState, PollOutcome, Reason, RouteKind,
};
use crate::tls_gate::{
    accept_connection, load_certs_pem, load_key_pem, server_config, DeviceCertVerifier, TlsClientInfo,
    TlsGateCounts, TlsGateMetrics,
};
use crate::token::{mint, publish_keys, IdentityClaims, SigningKeyPair, SigningKeys, IDENTITY_HEADER, KEYS_PATH};

pub type GatewayBody = BoxBody<Bytes, hyper::Error>;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const MAX_REQUEST_HEAD: usize = 1024 * 1024;

/// Everything a gateway needs, already loaded.
pub struct GatewayParts {
    pub listen: SocketAddr,
    pub gateway_id: String,
    pub trust_root: CertificateDer<'static>,
    pub server_chain: Vec<CertificateDer<'static>>,
    pub server_key: PrivateKeyDer<'static>,
    pub signing_keys: SigningKeys,
    pub idp_config: IdpConfig,
    pub idp: Arc<dyn IdpClient>,
    pub geo: GeoDb,
    pub sessions: Arc<SessionStore>,
    pub control_plane: ControlPlaneClient,
    pub clock: SharedClock,
    pub poll_interval: Duration,
    pub header_limit_bytes: usize,
    pub token_ttl_s: i64,
    pub session_ttl: chrono::Duration,
    pub upstream_connect_timeout: Duration,
    pub log_path: PathBuf,
    pub dead_letter_path: PathBuf,
}

impl GatewayParts {
    /// Loads key material, the geo database and the session journal named in
    /// `cfg`.
    pub fn from_config(cfg: &GatewayConfig, clock: SharedClock) -> anyhow::Result<Self> {
        use anyhow::Context;
        let read = |p: &PathBuf| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
        let trust_root = load_certs_pem(&read(&cfg.trust_root_path)?)?.remove(0);
        let server_chain = load_certs_pem(&read(&cfg.server_cert_path)?)?;
        let server_key = load_key_pem(&read(&cfg.server_key_path)?)?;
        let now = clock.now();
        let mut signing_keys = match &cfg.previous_signing_key_path {
            Some(p) => SigningKeys::new(SigningKeyPair::load(p, now)?),
            None => SigningKeys::new(SigningKeyPair::load(&cfg.signing_key_path, now)?),
        };
        if cfg.previous_signing_key_path.is_some() {
            signing_keys.rotate(SigningKeyPair::load(&cfg.signing_key_path, now)?);
        }
        let geo = match &cfg.geo_db_path {
            Some(p) => GeoDb::load(p).with_context(|| format!("geo db {}", p.display()))?,
            None => GeoDb::default(),
        };
        let sessions = match &cfg.session_journal_path {
            Some(p) => SessionStore::with_journal(p)?,
            None => SessionStore::new(),
        };
        Ok(Self {
            listen: cfg.listen,
            gateway_id: cfg.gateway_id.clone(),
            trust_root,
            server_chain,
            server_key,
            signing_keys,
            idp: Arc::new(HttpIdpClient::new(cfg.idp.clone())),
            idp_config: cfg.idp.clone(),
            geo,
            sessions: Arc::new(sessions),
            control_plane: ControlPlaneClient::new(&cfg.control_plane_url, cfg.control_plane_token.clone())?,
            clock,
            poll_interval: Duration::from_secs(cfg.poll_interval_s),
            header_limit_bytes: cfg.header_limit_bytes,
            token_ttl_s: cfg.token_ttl_s,
            session_ttl: chrono::Duration::seconds(cfg.session_ttl_s),
            upstream_connect_timeout: Duration::from_millis(cfg.upstream_connect_timeout_ms),
            log_path: cfg.log_path.clone(),
            dead_letter_path: cfg.dead_letter_path.clone(),
        })
    }
}

struct Inner {
    trust_root: CertificateDer<'static>,
    clock: SharedClock,
    policy: Arc<PolicyState>,
    sessions: Arc<SessionStore>,
    idp: Arc<dyn IdpClient>,
    idp_config: IdpConfig,
    geo: GeoDb,
    keys: RwLock<SigningKeys>,
    logger: AccessLogger,
    tls_metrics: TlsGateMetrics,
    tunnels: Arc<TunnelRegistry>,
    upstream: Client<HttpConnector, Incoming>,
    control_plane: ControlPlaneClient,
    header_limit: usize,
    token_ttl_s: i64,
    session_ttl: chrono::Duration,
    connect_timeout: Duration,
    shutdown: CancellationToken,
}

fn full(status: StatusCode, content_type: &'static str, body: impl Into<Bytes>) -> Response<GatewayBody> {
    let mut r = Response::new(Full::new(body.into()).map_err(|never: Infallible| match never {}).boxed());
    *r.status_mut() = status;
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    r
}

fn reason_response(status: StatusCode, outcome: LogOutcome, reason: &str, version: Option<u64>) -> Response<GatewayBody> {
    let body = serde_json::json!({
        "outcome": outcome.as_str(),
        "reason": reason,
        "policy_version": version,
    });
    full(status, "application/json", body.to_string())
}

fn redirect(location: &str) -> Response<GatewayBody> {
    let mut r = full(StatusCode::FOUND, "text/plain", "");
    if let Ok(v) = HeaderValue::from_str(location) {
        r.headers_mut().insert(header::LOCATION, v);
    }
    r
}

/// Lowercased host without port, and the authority as sent.
fn request_host<B>(req: &Request<B>) -> Option<(String, String)> {
    let authority = req
        .headers()
        .get(header::HOST)
        .and_then(|h| h.to_str().ok())
        .map(str::to_string)
        .or_else(|| req.uri().authority().map(|a| a.to_string()))?;
    let parsed: http::uri::Authority = authority.parse().ok()?;
    let host = parsed.host().trim_end_matches('.').to_ascii_lowercase();
    (!host.is_empty()).then_some((host, authority))
}

fn query_param(query: Option<&str>, key: &str) -> Option<String> {
    url::form_urlencoded::parse(query.unwrap_or("").as_bytes())
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.into_owned())
}

impl Inner {
    async fn emit(&self, mut draft: RecordDraft, started: Instant) {
        draft.latency_us = started.elapsed().as_micros() as u64;
        self.logger.emit(draft).await;
    }

    async fn respond(
        &self,
        draft: RecordDraft,
        started: Instant,
        response: Response<GatewayBody>,
    ) -> Response<GatewayBody> {
        self.emit(draft, started).await;
        response
    }

    async fn deny(
        &self,
        mut draft: RecordDraft,
        started: Instant,
        reason: &str,
        version: Option<u64>,
    ) -> Response<GatewayBody> {
        draft = draft.outcome(LogOutcome::Deny, reason);
        draft.policy_version = version;
        self.respond(
            draft,
            started,
            reason_response(StatusCode::FORBIDDEN, LogOutcome::Deny, reason, version),
        )
        .await
    }

    async fn error(
        &self,
        mut draft: RecordDraft,
        started: Instant,
        status: StatusCode,
        reason: &str,
    ) -> Response<GatewayBody> {
        draft = draft.outcome(LogOutcome::Error, reason);
        let version = draft.policy_version;
        self.respond(draft, started, reason_response(status, LogOutcome::Error, reason, version))
            .await
    }

    fn current_version(&self) -> Option<u64> {
        self.policy.current().map(|s| s.version)
    }

    /// Decision under the pinned snapshot, failing closed when stale.
    fn decide(&self, host: &str, session: &Session, client: &TlsClientInfo, now: chrono::DateTime<chrono::Utc>) -> (AccessDecision, Option<Arc<crate::policy::PolicySnapshot>>) {
        let pinned = self.policy.pin(now);
        match (&pinned.snapshot, pinned.freshness) {
            (Some(s), Freshness::Fresh) => (evaluate(s, host, session, client, now), pinned.snapshot.clone()),
            _ => (
                AccessDecision::deny(Reason::StalePolicyFailClosed, pinned.version().unwrap_or(0)),
                None,
            ),
        }
    }

    async fn handle(self: Arc<Self>, req: Request<Incoming>, client: Arc<TlsClientInfo>) -> Response<GatewayBody> {
        let started = Instant::now();
        let now = self.clock.now();
        let mut draft = RecordDraft::new(now, client.peer_ip);
        draft.fingerprint = Some(client.fingerprint.clone());

        if req.method() == Method::CONNECT {
            return self.handle_connect(req, &client, draft, started).await;
        }
        draft.path = req.uri().path().to_string();
        let Some((host, authority)) = request_host(&req) else {
            return self.error(draft, started, StatusCode::BAD_REQUEST, "bad_request").await;
        };
        draft.host = host.clone();

        let sanitized = sanitize_inbound(req.headers());
        if header_block_size(&sanitized) > self.header_limit {
            return self
                .error(draft, started, StatusCode::REQUEST_HEADER_FIELDS_TOO_LARGE, "oversize_headers")
                .await;
        }

        match req.uri().path() {
            KEYS_PATH if req.method() == Method::GET => {
                let doc = publish_keys(self.keys.read().unwrap().all()).unwrap_or_else(|_| "{}".into());
                draft = draft.outcome(LogOutcome::Allow, Reason::Ok.as_str());
                draft.policy_version = self.current_version();
                return self
                    .respond(draft, started, full(StatusCode::OK, "application/json", doc))
                    .await;
            }
            CALLBACK_PATH => return self.callback(&req, &client, draft, started, now).await,
            _ => {}
        }

        let cookies: Vec<&str> = req
            .headers()
            .get_all(header::COOKIE)
            .iter()
            .filter_map(|v| v.to_str().ok())
            .collect();
        let cookie_header = (!cookies.is_empty()).then(|| cookies.join("; "));
        let session = match check_session(cookie_header.as_deref(), &self.sessions, &client, now) {
            Ok(s) => s,
            Err(missing) => return self.start_sso(&req, &client, &host, &authority, missing, draft, started, now).await,
        };
        draft.user_id = Some(session.user_id.clone());

        let (decision, snapshot) = self.decide(&host, &session, &client, now);
        if !decision.is_allow() {
            let version = snapshot.as_ref().map(|s| s.version).or(self.current_version());
            return self.deny(draft, started, decision.reason.as_str(), version).await;
        }
        let snapshot = snapshot.expect("allow implies a fresh snapshot");
        let route = snapshot.routes.get(&host).expect("allow implies a route");
        if route.kind != RouteKind::Http {
            return self
                .deny(draft, started, Reason::UnknownHost.as_str(), Some(snapshot.version))
                .await;
        }
        draft.policy_version = Some(snapshot.version);

        let claims = IdentityClaims::for_session(&session, &host, snapshot.version, now, self.token_ttl_s);
        let token = {
            let keys = self.keys.read().unwrap();
            mint(&claims, keys.current())
        };
        let Ok(token) = token else {
            return self
                .error(draft, started, StatusCode::INTERNAL_SERVER_ERROR, "token_mint_failed")
                .await;
        };

        let (parts, body) = req.into_parts();
        let path_and_query = parts.uri.path_and_query().map_or("/", |p| p.as_str());
        let uri: http::Uri = match format!("http://{}{}", route.upstream, path_and_query).parse() {
            Ok(u) => u,
            Err(_) => {
                return self
                    .error(draft, started, StatusCode::BAD_GATEWAY, "upstream_unreachable")
                    .await
            }
        };
        let mut out = Request::new(body);
        *out.method_mut() = parts.method;
        *out.uri_mut() = uri;
        let mut fwd_headers = sanitized;
        fwd_headers.insert("x-forwarded-for", forwarded_for(&parts.headers, client.peer_ip));
        fwd_headers.insert("x-forwarded-proto", HeaderValue::from_static("https"));
        fwd_headers.insert(
            IDENTITY_HEADER,
            HeaderValue::from_str(&token).expect("token is base64url"),
        );
        *out.headers_mut() = fwd_headers;

        match self.upstream.request(out).await {
            Ok(resp) => {
                let (mut parts, body) = resp.into_parts();
                headers::strip_response_hop_by_hop(&mut parts.headers);
                draft = draft.outcome(LogOutcome::Allow, Reason::Ok.as_str());
                self.emit(draft, started).await;
                Response::from_parts(parts, body.boxed())
            }
            Err(e) => {
                tracing::warn!(upstream = %route.upstream, error = %e, "upstream request failed");
                self.error(draft, started, StatusCode::BAD_GATEWAY, "upstream_unreachable")
                    .await
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    async fn start_sso(
        &self,
        req: &Request<Incoming>,
        client: &TlsClientInfo,
        host: &str,
        authority: &str,
        missing: NoSession,
        mut draft: RecordDraft,
        started: Instant,
        now: chrono::DateTime<chrono::Utc>,
    ) -> Response<GatewayBody> {
        let pinned = self.policy.pin(now);
        draft.policy_version = pinned.version();
        if let (Some(s), Freshness::Fresh) = (&pinned.snapshot, pinned.freshness) {
            if !s.routes.contains_key(host) {
                return self
                    .deny(draft, started, Reason::UnknownHost.as_str(), Some(s.version))
                    .await;
            }
        }
        let pq = req.uri().path_and_query().map_or("/", |p| p.as_str());
        let url = format!("https://{authority}{pq}");
        match initiate_sso(&url, client, &self.idp_config, &self.sessions, now) {
            Ok(r) => {
                draft = draft.outcome(LogOutcome::Deny, missing.reason_code());
                self.respond(draft, started, redirect(&r.location)).await
            }
            Err(AuthnError::StoreFull) => {
                self.error(draft, started, StatusCode::SERVICE_UNAVAILABLE, "sso_store_full")
                    .await
            }
            Err(AuthnError::BadUrl(_)) => self.error(draft, started, StatusCode::BAD_REQUEST, "bad_request").await,
        }
    }

    async fn callback(
        &self,
        req: &Request<Incoming>,
        client: &TlsClientInfo,
        mut draft: RecordDraft,
        started: Instant,
        now: chrono::DateTime<chrono::Utc>,
    ) -> Response<GatewayBody> {
        draft.policy_version = self.current_version();
        let code = query_param(req.uri().query(), "code").unwrap_or_default();
        let state = query_param(req.uri().query(), "state").unwrap_or_default();
        let result = handle_callback(
            &code,
            &state,
            client,
            self.idp.as_ref(),
            &self.sessions,
            &self.geo,
            self.session_ttl,
            now,
        )
        .await;
        match result {
            Ok(outcome) => {
                draft.user_id = Some(outcome.session.user_id.clone());
                draft = draft.outcome(LogOutcome::Allow, Reason::Ok.as_str());
                let mut r = redirect(&outcome.redirect_to);
                if let Ok(v) = HeaderValue::from_str(&outcome.set_cookie) {
                    r.headers_mut().insert(header::SET_COOKIE, v);
                }
                self.respond(draft, started, r).await
            }
            Err(e @ CallbackError::IdpUnreachable(_)) => {
                tracing::warn!(error = %e, "code exchange failed");
                self.error(draft, started, StatusCode::BAD_GATEWAY, e.reason_code()).await
            }
            Err(e) => {
                let version = draft.policy_version;
                self.deny(draft, started, e.reason_code(), version).await
            }
        }
    }

    async fn handle_connect(
        self: Arc<Self>,
        mut req: Request<Incoming>,
        client: &TlsClientInfo,
        mut draft: RecordDraft,
        started: Instant,
    ) -> Response<GatewayBody> {
        let now = draft.timestamp;
        let Some(authority) = req.uri().authority().cloned() else {
            return self.error(draft, started, StatusCode::BAD_REQUEST, "malformed_connect").await;
        };
        draft.path = authority.to_string();
        let host = authority.host().trim_end_matches('.').to_ascii_lowercase();
        draft.host = host.clone();
        if authority.port_u16().is_none() {
            return self.error(draft, started, StatusCode::BAD_REQUEST, "malformed_connect").await;
        }
        if header_block_size(&sanitize_inbound(req.headers())) > self.header_limit {
            return self
                .error(draft, started, StatusCode::REQUEST_HEADER_FIELDS_TOO_LARGE, "oversize_headers")
                .await;
        }

        let session_ref = req
            .headers()
            .get(header::PROXY_AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| {
                let (scheme, token) = v.trim().split_once(' ')?;
                scheme.eq_ignore_ascii_case(AUTH_SCHEME).then(|| token.trim().to_string())
            });
        let session = match session_ref.as_deref().map(|id| check_session_id(id, &self.sessions, client, now)) {
            Some(Ok(s)) => s,
            Some(Err(e)) => {
                let v = self.current_version();
                return self.deny(draft, started, e.reason_code(), v).await;
            }
            None => {
                let v = self.current_version();
                return self.deny(draft, started, NoSession::NoCookie.reason_code(), v).await;
            }
        };
        draft.user_id = Some(session.user_id.clone());

        let decision = tunnel_decision(&self.policy, &host, &session, client, now);
        draft.policy_version = Some(decision.policy_version).filter(|v| *v > 0).or(self.current_version());
        if !decision.is_allow() {
            let v = draft.policy_version;
            return self.deny(draft, started, decision.reason.as_str(), v).await;
        }
        let upstream = self
            .policy
            .current()
            .and_then(|s| s.routes.get(&host).map(|r| r.upstream.clone()))
            .unwrap_or_default();
        let target = match tokio::time::timeout(self.connect_timeout, TcpStream::connect(upstream.as_str())).await {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                tracing::warn!(%upstream, error = %e, "tunnel upstream connect failed");
                return self
                    .error(draft, started, StatusCode::BAD_GATEWAY, "upstream_unreachable")
                    .await;
            }
            Err(_) => {
                return self
                    .error(draft, started, StatusCode::BAD_GATEWAY, "upstream_unreachable")
                    .await
            }
        };
        let _ = target.set_nodelay(true);

        let guard = self.tunnels.register(&host, session, client.clone());
        let on_upgrade = hyper::upgrade::on(&mut req);
        let shutdown = self.shutdown.clone();
        tokio::spawn(async move {
            let mut target = target;
            let upgraded = match on_upgrade.await {
                Ok(u) => u,
                Err(e) => {
                    tracing::warn!(error = %e, "tunnel upgrade failed");
                    return;
                }
            };
            let mut client_io = TokioIo::new(upgraded);
            tokio::select! {
                r = tokio::io::copy_bidirectional(&mut client_io, &mut target) => {
                    if let Err(e) = r {
                        tracing::debug!(error = %e, "tunnel closed with error");
                    }
                }
                _ = guard.cancelled() => tracing::info!("tunnel terminated by policy"),
                _ = shutdown.cancelled() => {}
            }
            drop(guard);
        });

        draft = draft.outcome(LogOutcome::Allow, Reason::Ok.as_str());
        let mut resp = full(StatusCode::OK, "text/plain", "");
        resp.headers_mut().remove(header::CONTENT_TYPE);
        resp.extensions_mut().insert(
            hyper::ext::ReasonPhrase::from_static(b"Connection Established"),
        );
        self.respond(draft, started, resp).await
    }

    async fn serve_connection(self: Arc<Self>, acceptor: TlsAcceptor, tcp: TcpStream, peer: SocketAddr) {
        let started = Instant::now();
        let at = self.clock.now();
        let handshake = tokio::time::timeout(
            HANDSHAKE_TIMEOUT,
            accept_connection(&acceptor, tcp, peer, &self.trust_root, &self.clock, &self.tls_metrics),
        )
        .await;
        let (tls, info) = match handshake {
            Ok(Ok(ok)) => ok,
            Ok(Err(e)) => {
                tracing::info!(%peer, reason = e.reason_code(), error = %e, "handshake refused");
                let draft = RecordDraft::new(at, peer.ip()).outcome(LogOutcome::Error, e.reason_code());
                self.emit(draft, started).await;
                return;
            }
            Err(_) => {
                let draft = RecordDraft::new(at, peer.ip()).outcome(LogOutcome::Error, "handshake_timeout");
                self.emit(draft, started).await;
                return;
            }
        };
        let info = Arc::new(info);
        let inner = self.clone();
        let svc = service_fn(move |req| {
            let inner = inner.clone();
            let info = info.clone();
            async move { Ok::<_, Infallible>(inner.handle(req, info).await) }
        });
        let mut builder = hyper::server::conn::http1::Builder::new();
        builder.max_buf_size(MAX_REQUEST_HEAD).max_headers(1024);
        let conn = builder.serve_connection(TokioIo::new(tls), svc).with_upgrades();
        tokio::select! {
            r = conn => {
                if let Err(e) = r {
                    tracing::debug!(%peer, error = %e, "connection closed with error");
                }
            }
            _ = self.shutdown.cancelled() => {}
        }
    }

    fn after_poll(&self, outcome: &PollOutcome) {
        let torn = self.tunnels.sweep(&self.policy, self.clock.now());
        if torn > 0 {
            tracing::info!(torn, ?outcome, "tunnels torn down after policy poll");
        }
    }
}

/// A running gateway.
pub struct Gateway {
    addr: SocketAddr,
    inner: Arc<Inner>,
    shipper_stats: Arc<ShipperStats>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("addr", &self.addr)
            .field("gateway_id", &self.inner.logger.gateway_id())
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Binds the listener, performs one policy poll, then starts serving,
    /// polling and shipping logs in the background.
    pub async fn start(parts: GatewayParts) -> anyhow::Result<Self> {
        let listener = TcpListener::bind(parts.listen).await?;
        let addr = listener.local_addr()?;
        let verifier = Arc::new(DeviceCertVerifier::new(parts.trust_root.clone(), parts.clock.clone())?);
        let tls = server_config(parts.server_chain, parts.server_key, verifier)?;
        let acceptor = TlsAcceptor::from(Arc::new(tls));

        if let Some(dir) = parts.log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let queue = Arc::new(ShipQueue::new(QUEUE_CAPACITY));
        let logger = AccessLogger::open(&parts.gateway_id, &parts.log_path, queue.clone())?;

        let mut connector = HttpConnector::new();
        connector.set_connect_timeout(Some(parts.upstream_connect_timeout));
        connector.set_nodelay(true);
        let upstream = Client::builder(TokioExecutor::new())
            .pool_idle_timeout(Duration::from_secs(30))
            .build(connector);

        let inner = Arc::new(Inner {
            trust_root: parts.trust_root,
            clock: parts.clock,
            policy: Arc::new(PolicyState::new()),
            sessions: parts.sessions,
            idp: parts.idp,
            idp_config: parts.idp_config,
            geo: parts.geo,
            keys: RwLock::new(parts.signing_keys),
            logger,
            tls_metrics: TlsGateMetrics::default(),
            tunnels: Arc::new(TunnelRegistry::default()),
            upstream,
            control_plane: parts.control_plane.clone(),
            header_limit: parts.header_limit_bytes,
            token_ttl_s: parts.token_ttl_s,
            session_ttl: parts.session_ttl,
            connect_timeout: parts.upstream_connect_timeout,
            shutdown: CancellationToken::new(),
        });

        let first = poll_policy(&inner.control_plane, &inner.policy, inner.clock.now()).await;
        tracing::info!(?first, "initial policy poll");

        let mut tasks = Vec::new();
        let poller_inner = inner.clone();
        tasks.push(tokio::spawn(async move {
            let cb_inner = poller_inner.clone();
            crate::policy::run_poller(
                poller_inner.control_plane.clone(),
                poller_inner.policy.clone(),
                parts.poll_interval,
                poller_inner.clock.clone(),
                move |o| cb_inner.after_poll(o),
            )
            .await;
        }));

        let shipper_stats = Arc::new(ShipperStats::default());
        tasks.push(tokio::spawn(run_shipper(
            queue,
            parts.control_plane,
            parts.dead_letter_path,
            shipper_stats.clone(),
        )));

        let accept_inner = inner.clone();
        tasks.push(tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = accept_inner.shutdown.cancelled() => break,
                    r = listener.accept() => match r {
                        Ok((tcp, peer)) => {
                            let _ = tcp.set_nodelay(true);
                            tokio::spawn(accept_inner.clone().serve_connection(acceptor.clone(), tcp, peer));
                        }
                        Err(e) => {
                            tracing::warn!(error = %e, "accept failed");
                            tokio::time::sleep(Duration::from_millis(20)).await;
                        }
                    }
                }
            }
        }));

        Ok(Self {
            addr,
            inner,
            shipper_stats,
            tasks,
        })
    }

    pub async fn from_config(cfg: &GatewayConfig, clock: SharedClock) -> anyhow::Result<Self> {
        Self::start(GatewayParts::from_config(cfg, clock)?).await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn gateway_id(&self) -> &str {
        self.inner.logger.gateway_id()
    }

    pub fn tls_counts(&self) -> TlsGateCounts {
        self.inner.tls_metrics.snapshot()
    }

    pub fn policy(&self) -> &Arc<PolicyState> {
        &self.inner.policy
    }

    pub fn sessions(&self) -> &Arc<SessionStore> {
        &self.inner.sessions
    }

    pub fn logger(&self) -> &AccessLogger {
        &self.inner.logger
    }

    pub fn shipper_stats(&self) -> &ShipperStats {
        &self.shipper_stats
    }

    pub fn active_tunnels(&self) -> usize {
        self.inner.tunnels.len()
    }

    pub fn published_keys(&self) -> crate::token::PublishedKeys {
        self.inner.keys.read().unwrap().published()
    }

    /// Makes `next` the minting key; the previous key stays published.
    pub fn rotate_signing_key(&self, next: SigningKeyPair) {
        self.inner.keys.write().unwrap().rotate(next);
    }

    /// Polls immediately instead of waiting for the next tick.
    pub async fn poll_now(&self) -> PollOutcome {
        let o = poll_policy(&self.inner.control_plane, &self.inner.policy, self.inner.clock.now()).await;
        self.inner.after_poll(&o);
        o
    }

    /// Re-checks live tunnels against the active snapshot.
    pub fn sweep_tunnels(&self) -> usize {
        self.inner.tunnels.sweep(&self.inner.policy, self.inner.clock.now())
    }

    pub async fn shutdown(mut self) {
        self.stop_tasks();
        for t in std::mem::take(&mut self.tasks) {
            let _ = t.await;
        }
    }

    fn stop_tasks(&self) {
        self.inner.shutdown.cancel();
        self.inner.tunnels.cancel_all();
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// A gateway dropped without `shutdown` (a failed test, a timeout) must not
/// keep serving from background tasks.
impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop_tasks();
    }
}
