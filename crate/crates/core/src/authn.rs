//! SSO relying party and the server-side session store.
//!
//! Browsers hold only an opaque `zta_session` cookie. The session it names
//! lives here, carries the user's directory attributes and is bound to the
//! fingerprint of the device certificate that completed the login.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use async_trait::async_trait;
use chrono::{DateTime, Duration, Utc};
use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tls_gate::TlsClientInfo;
use crate::util::random_token;

pub const SESSION_COOKIE: &str = "zta_session";
pub const CALLBACK_PATH: &str = "/.zta/callback";
pub const FLOW_TTL_SECS: i64 = 300;
pub const DEFAULT_SESSION_TTL_SECS: i64 = 8 * 3600;
/// Prior logins carried into a new session for travel checks.
const LOGIN_HISTORY: usize = 8;
const DEFAULT_MAX_FLOWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmploymentType {
    #[serde(rename = "FTE")]
    Fte,
    #[serde(rename = "CONTRACTOR")]
    Contractor,
}

impl EmploymentType {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fte => "FTE",
            Self::Contractor => "CONTRACTOR",
        }
    }
}

impl std::fmt::Display for EmploymentType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// One login. `geo` is `None` when the source address is not in the geo table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoginEvent {
    pub at: DateTime<Utc>,
    pub source_ip: IpAddr,
    pub geo: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub user_id: String,
    pub groups: Vec<String>,
    pub employment_type: EmploymentType,
    pub device_fingerprint: String,
    pub created_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub login_events: Vec<LoginEvent>,
}

impl Session {
    /// SHA-256 of the session id, safe to hand to downstream apps.
    pub fn hashed_id(&self) -> String {
        hex::encode(Sha256::digest(self.session_id.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthFlowState {
    pub state_nonce: String,
    pub original_url: String,
    pub redirect_uri: String,
    pub created_at: DateTime<Utc>,
    pub device_fingerprint: String,
}

/// Longest-prefix CIDR table mapping source addresses to coordinates.
#[derive(Debug, Clone, Default)]
pub struct GeoDb {
    entries: Vec<(IpNet, GeoPoint)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeoDbEntry {
    cidr: IpNet,
    lat: f64,
    lon: f64,
}

impl GeoDb {
    pub fn new(entries: impl IntoIterator<Item = (IpNet, GeoPoint)>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let raw: Vec<GeoDbEntry> = serde_json::from_str(json)?;
        Ok(Self::new(
            raw.into_iter()
                .map(|e| (e.cidr, GeoPoint::new(e.lat, e.lon))),
        ))
    }

    pub fn to_json(&self) -> String {
        let raw: Vec<GeoDbEntry> = self
            .entries
            .iter()
            .map(|(cidr, p)| GeoDbEntry {
                cidr: *cidr,
                lat: p.lat,
                lon: p.lon,
            })
            .collect();
        serde_json::to_string_pretty(&raw).expect("geo db serializes")
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn lookup(&self, ip: IpAddr) -> Option<GeoPoint> {
        self.entries
            .iter()
            .filter(|(net, _)| net.contains(&ip))
            .max_by_key(|(net, _)| net.prefix_len())
            .map(|(_, p)| *p)
    }
}

/// Appends a login at `now` from `ip`. Events stay ordered by timestamp; an
/// event tied with existing ones goes after them.
pub fn record_login_geo(mut session: Session, ip: IpAddr, geo: &GeoDb, now: DateTime<Utc>) -> Session {
    let event = LoginEvent {
        at: now,
        source_ip: ip,
        geo: geo.lookup(ip),
    };
    let pos = session.login_events.partition_point(|e| e.at <= now);
    session.login_events.insert(pos, event);
    session
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum NoSession {
    #[error("no session cookie")]
    NoCookie,
    #[error("unknown session")]
    Unknown,
    #[error("session expired")]
    Expired,
    #[error("session belongs to another device")]
    DeviceMismatch,
}

impl NoSession {
    pub fn reason_code(&self) -> &'static str {
        match self {
            Self::DeviceMismatch => "device_mismatch",
            _ => "no_session",
        }
    }
}

#[derive(Debug, Error)]
pub enum AuthnError {
    #[error("too many pending logins")]
    StoreFull,
    #[error("bad request url: {0}")]
    BadUrl(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallbackError {
    #[error("unknown or already used state")]
    UnknownState,
    #[error("login flow expired")]
    StateExpired,
    #[error("callback presented by a different device")]
    DeviceMismatch,
    #[error("identity provider rejected the code: {0}")]
    IdpRejectedCode(String),
    #[error("identity provider unreachable: {0}")]
    IdpUnreachable(String),
}

impl CallbackError {
    pub fn reason_code(&self) -> &'static str {
        match self {
            Self::UnknownState => "unknown_state",
            Self::StateExpired => "state_expired",
            Self::DeviceMismatch => "device_mismatch",
            Self::IdpRejectedCode(_) => "idp_rejected_code",
            Self::IdpUnreachable(_) => "idp_unreachable",
        }
    }
}

/// Claims returned by the IdP token endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpAssertion {
    pub sub: String,
    pub groups: Vec<String>,
    pub employment_type: EmploymentType,
    pub auth_time: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdpError {
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("unreachable: {0}")]
    Unreachable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpConfig {
    pub authorize_url: String,
    pub token_url: String,
    pub client_id: String,
    pub client_secret: String,
}

#[async_trait]
pub trait IdpClient: Send + Sync {
    async fn exchange_code(&self, code: &str, redirect_uri: &str) -> Result<IdpAssertion, IdpError>;
}

/// Token-endpoint client speaking the form-encoded code exchange.
#[derive(Debug, Clone)]
pub struct HttpIdpClient {
    config: IdpConfig,
    http: reqwest::Client,
}

impl HttpIdpClient {
    pub fn new(config: IdpConfig) -> Self {
        let http = reqwest::Client::builder()
            .timeout(std::time::Duration::from_secs(5))
            .build()
            .expect("http client builds");
        Self { config, http }
    }
}

#[async_trait]
impl IdpClient for HttpIdpClient {
    async fn exchange_code(&self, code: &str, redirect_uri: &str) -> Result<IdpAssertion, IdpError> {
        let resp = self
            .http
            .post(&self.config.token_url)
            .form(&[
                ("grant_type", "authorization_code"),
                ("code", code),
                ("client_id", &self.config.client_id),
                ("client_secret", &self.config.client_secret),
                ("redirect_uri", redirect_uri),
            ])
            .send()
            .await
            .map_err(|e| IdpError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(IdpError::Rejected(format!("{status}: {body}")));
        }
        resp.json::<IdpAssertion>()
            .await
            .map_err(|e| IdpError::Rejected(format!("bad assertion: {e}")))
    }
}

/// Sessions and pending login flows.
///
/// Reads are concurrent; writers serialize on the maps. Callers always get
/// owned copies of a [`Session`].
#[derive(Debug)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Session>>,
    flows: Mutex<HashMap<String, AuthFlowState>>,
    user_logins: Mutex<HashMap<String, Vec<LoginEvent>>>,
    max_flows: usize,
    journal: Option<Mutex<File>>,
}

impl Default for SessionStore {
    fn default() -> Self {
        Self::new()
    }
}

impl SessionStore {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_MAX_FLOWS)
    }

    pub fn with_capacity(max_flows: usize) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            flows: Mutex::new(HashMap::new()),
            user_logins: Mutex::new(HashMap::new()),
            max_flows,
            journal: None,
        }
    }

    /// Opens a store backed by an append-only JSONL journal, replaying any
    /// sessions already recorded there.
    pub fn with_journal(path: &Path) -> std::io::Result<Self> {
        let mut store = Self::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut sessions = store.sessions.write().unwrap();
            let mut logins = store.user_logins.lock().unwrap();
            for line in reader.lines() {
                let line = line?;
                let Ok(session) = serde_json::from_str::<Session>(&line) else {
                    tracing::warn!(path = %path.display(), "skipping unreadable session journal line");
                    continue;
                };
                logins.insert(session.user_id.clone(), session.login_events.clone());
                sessions.insert(session.session_id.clone(), session);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.journal = Some(Mutex::new(file));
        Ok(store)
    }

    pub fn get(&self, session_id: &str) -> Option<Session> {
        self.sessions.read().unwrap().get(session_id).cloned()
    }

    pub fn insert(&self, session: Session) {
        if let Some(journal) = &self.journal {
            let line = serde_json::to_string(&session).expect("session serializes");
            let mut f = journal.lock().unwrap();
            if let Err(e) = writeln!(f, "{line}") {
                tracing::error!(error = %e, "session journal write failed");
            }
        }
        self.user_logins
            .lock()
            .unwrap()
            .insert(session.user_id.clone(), session.login_events.clone());
        self.sessions
            .write()
            .unwrap()
            .insert(session.session_id.clone(), session);
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn prior_logins(&self, user_id: &str) -> Vec<LoginEvent> {
        self.user_logins
            .lock()
            .unwrap()
            .get(user_id)
            .cloned()
            .unwrap_or_default()
    }

    fn put_flow(&self, flow: AuthFlowState, now: DateTime<Utc>) -> Result<(), AuthnError> {
        let mut flows = self.flows.lock().unwrap();
        if flows.len() >= self.max_flows {
            flows.retain(|_, f| now - f.created_at <= Duration::seconds(FLOW_TTL_SECS));
        }
        if flows.len() >= self.max_flows {
            return Err(AuthnError::StoreFull);
        }
        flows.insert(flow.state_nonce.clone(), flow);
        Ok(())
    }

    fn take_flow(&self, state: &str) -> Option<AuthFlowState> {
        self.flows.lock().unwrap().remove(state)
    }

    pub fn pending_flows(&self) -> usize {
        self.flows.lock().unwrap().len()
    }
}

/// Extracts a cookie value from a `Cookie` header.
pub fn cookie_value<'a>(cookie_header: &'a str, name: &str) -> Option<&'a str> {
    cookie_header.split(';').find_map(|pair| {
        let (k, v) = pair.trim().split_once('=')?;
        (k.trim() == name).then(|| v.trim())
    })
}

/// Looks up a live session for `session_id` bound to the presenting device.
pub fn check_session_id(
    session_id: &str,
    store: &SessionStore,
    client: &TlsClientInfo,
    now: DateTime<Utc>,
) -> Result<Session, NoSession> {
    let session = store.get(session_id).ok_or(NoSession::Unknown)?;
    if now >= session.expires_at {
        return Err(NoSession::Expired);
    }
    if session.device_fingerprint != client.fingerprint {
        return Err(NoSession::DeviceMismatch);
    }
    Ok(session)
}

/// Resolves the session named by the `zta_session` cookie, if any.
pub fn check_session(
    cookie_header: Option<&str>,
    store: &SessionStore,
    client: &TlsClientInfo,
    now: DateTime<Utc>,
) -> Result<Session, NoSession> {
    let id = cookie_header
        .and_then(|h| cookie_value(h, SESSION_COOKIE))
        .filter(|v| !v.is_empty())
        .ok_or(NoSession::NoCookie)?;
    check_session_id(id, store, client, now)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsoRedirect {
    pub location: String,
    pub state: String,
}

/// Starts a code flow: stores the pending state and builds the IdP redirect.
pub fn initiate_sso(
    request_url: &str,
    client: &TlsClientInfo,
    idp: &IdpConfig,
    store: &SessionStore,
    now: DateTime<Utc>,
) -> Result<SsoRedirect, AuthnError> {
    let original = url::Url::parse(request_url).map_err(|e| AuthnError::BadUrl(e.to_string()))?;
    let host = original
        .host_str()
        .ok_or_else(|| AuthnError::BadUrl("missing host".into()))?;
    let redirect_uri = match original.port() {
        Some(port) => format!("https://{host}:{port}{CALLBACK_PATH}"),
        None => format!("https://{host}{CALLBACK_PATH}"),
    };
    let state = random_token();
    let mut location =
        url::Url::parse(&idp.authorize_url).map_err(|e| AuthnError::BadUrl(e.to_string()))?;
    location
        .query_pairs_mut()
        .append_pair("client_id", &idp.client_id)
        .append_pair("redirect_uri", &redirect_uri)
        .append_pair("state", &state)
        .append_pair("response_type", "code");
    store.put_flow(
        AuthFlowState {
            state_nonce: state.clone(),
            original_url: request_url.to_string(),
            redirect_uri,
            created_at: now,
            device_fingerprint: client.fingerprint.clone(),
        },
        now,
    )?;
    Ok(SsoRedirect {
        location: location.into(),
        state,
    })
}

#[derive(Debug, Clone)]
pub struct CallbackOutcome {
    pub session: Session,
    pub set_cookie: String,
    pub redirect_to: String,
}

pub fn session_cookie(session_id: &str) -> String {
    format!("{SESSION_COOKIE}={session_id}; HttpOnly; Secure; SameSite=Lax; Path=/")
}

/// Completes a code flow. The state is consumed on first presentation,
/// whatever the outcome.
#[allow(clippy::too_many_arguments)]
pub async fn handle_callback(
    code: &str,
    state: &str,
    client: &TlsClientInfo,
    idp: &dyn IdpClient,
    store: &SessionStore,
    geo: &GeoDb,
    session_ttl: Duration,
    now: DateTime<Utc>,
) -> Result<CallbackOutcome, CallbackError> {
    let flow = store.take_flow(state).ok_or(CallbackError::UnknownState)?;
    if now - flow.created_at > Duration::seconds(FLOW_TTL_SECS) {
        return Err(CallbackError::StateExpired);
    }
    if flow.device_fingerprint != client.fingerprint {
        return Err(CallbackError::DeviceMismatch);
    }
    let assertion = idp
        .exchange_code(code, &flow.redirect_uri)
        .await
        .map_err(|e| match e {
            IdpError::Rejected(m) => CallbackError::IdpRejectedCode(m),
            IdpError::Unreachable(m) => CallbackError::IdpUnreachable(m),
        })?;

    let mut history = store.prior_logins(&assertion.sub);
    let keep_from = history.len().saturating_sub(LOGIN_HISTORY - 1);
    history.drain(..keep_from);
    let mut groups = assertion.groups;
    groups.sort();
    groups.dedup();
    let session = Session {
        session_id: random_token(),
        user_id: assertion.sub,
        groups,
        employment_type: assertion.employment_type,
        device_fingerprint: client.fingerprint.clone(),
        created_at: now,
        expires_at: now + session_ttl,
        login_events: history,
    };
    let session = record_login_geo(session, client.peer_ip, geo, now);
    store.insert(session.clone());
    Ok(CallbackOutcome {
        set_cookie: session_cookie(&session.session_id),
        redirect_to: flow.original_url,
        session,
    })
}

/// On-disk session reference written by `zta login` for CLI and SSH clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliToken {
    pub session: String,
    pub user: String,
    pub gateway: String,
    pub expires_at: DateTime<Utc>,
}

impl CliToken {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("token serializes");
        crate::util::write_private(path, &json)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn default_path() -> PathBuf {
        std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(".zta")
            .join("token.json")
    }
}
