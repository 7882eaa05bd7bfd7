//! Mock identity provider speaking a simplified authorization-code flow.
//!
//! `GET /authorize` redirects to a login form, a credential `POST /login`
//! redirects back with a single-use code, and `POST /token` trades the code
//! for the directory record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use chrono::{DateTime, Duration, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::authn::{EmploymentType, IdpAssertion};
use crate::clock::SharedClock;

pub const CODE_TTL_SECS: i64 = 60;

fn digest(salt: &[u8], password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

/// Salted SHA-256, formatted `sha256$<salt>$<digest>`. Fixture-grade only.
pub fn hash_password(password: &str) -> String {
    let mut salt = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut salt);
    format!("sha256${}${}", hex::encode(salt), digest(&salt, password))
}

pub fn verify_password(hash: &str, password: &str) -> bool {
    let mut parts = hash.split('$');
    let (Some("sha256"), Some(salt), Some(expected), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return false;
    };
    let Ok(salt) = hex::decode(salt) else {
        return false;
    };
    digest(&salt, password) == expected
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub password_hash: String,
    pub groups: BTreeSet<String>,
    pub employment_type: EmploymentType,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserDirectory {
    pub entries: BTreeMap<String, UserRecord>,
}

/// Password shared by every fixture user.
pub const FIXTURE_PASSWORD: &str = "correct horse";

impl UserDirectory {
    pub fn add(&mut self, user: &str, password: &str, groups: &[&str], employment_type: EmploymentType) {
        self.entries.insert(
            user.to_string(),
            UserRecord {
                password_hash: hash_password(password),
                groups: groups.iter().map(|g| g.to_string()).collect(),
                employment_type,
                active: true,
            },
        );
    }

    /// alice (FTE, eng), bob (CONTRACTOR, eng), carol (FTE, sre), plus an
    /// inactive dave.
    pub fn default_fixture() -> Self {
        let mut d = Self::default();
        d.add("alice", FIXTURE_PASSWORD, &["eng"], EmploymentType::Fte);
        d.add("bob", FIXTURE_PASSWORD, &["eng"], EmploymentType::Contractor);
        d.add("carol", FIXTURE_PASSWORD, &["sre"], EmploymentType::Fte);
        d.add("dave", FIXTURE_PASSWORD, &["eng"], EmploymentType::Fte);
        d.entries.get_mut("dave").expect("just added").active = false;
        d
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoginError {
    UnknownClient,
    BadCredentials,
    Inactive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenError {
    InvalidClient,
    InvalidGrant,
}

#[derive(Debug, Clone)]
struct Grant {
    user: String,
    client_id: String,
    redirect_uri: String,
    issued_at: DateTime<Utc>,
}

/// IdP state without the HTTP layer.
#[derive(Debug)]
pub struct IdpCore {
    directory: UserDirectory,
    clients: HashMap<String, String>,
    codes: Mutex<HashMap<String, Grant>>,
    clock: SharedClock,
}

impl IdpCore {
    pub fn new(directory: UserDirectory, clients: impl IntoIterator<Item = (String, String)>, clock: SharedClock) -> Self {
        Self {
            directory,
            clients: clients.into_iter().collect(),
            codes: Mutex::new(HashMap::new()),
            clock,
        }
    }

    pub fn is_registered(&self, client_id: &str) -> bool {
        self.clients.contains_key(client_id)
    }

    /// Checks credentials and issues a code bound to `redirect_uri`.
    pub fn login(&self, client_id: &str, redirect_uri: &str, user: &str, password: &str) -> Result<String, LoginError> {
        if !self.is_registered(client_id) {
            return Err(LoginError::UnknownClient);
        }
        let record = self
            .directory
            .entries
            .get(user)
            .filter(|r| verify_password(&r.password_hash, password))
            .ok_or(LoginError::BadCredentials)?;
        if !record.active {
            return Err(LoginError::Inactive);
        }
        let code = crate::util::random_token();
        self.codes.lock().unwrap().insert(
            code.clone(),
            Grant {
                user: user.to_string(),
                client_id: client_id.to_string(),
                redirect_uri: redirect_uri.to_string(),
                issued_at: self.clock.now(),
            },
        );
        Ok(code)
    }

    /// Consumes `code` whatever the outcome.
    pub fn exchange(
        &self,
        code: &str,
        client_id: &str,
        client_secret: &str,
        redirect_uri: Option<&str>,
    ) -> Result<IdpAssertion, TokenError> {
        if self.clients.get(client_id).map(String::as_str) != Some(client_secret) {
            return Err(TokenError::InvalidClient);
        }
        let grant = self.codes.lock().unwrap().remove(code).ok_or(TokenError::InvalidGrant)?;
        let now = self.clock.now();
        if now - grant.issued_at > Duration::seconds(CODE_TTL_SECS) || grant.client_id != client_id {
            return Err(TokenError::InvalidGrant);
        }
        if redirect_uri.is_some_and(|r| r != grant.redirect_uri) {
            return Err(TokenError::InvalidGrant);
        }
        let record = self.directory.entries.get(&grant.user).ok_or(TokenError::InvalidGrant)?;
        if !record.active {
            return Err(TokenError::InvalidGrant);
        }
        Ok(IdpAssertion {
            sub: grant.user,
            groups: record.groups.iter().cloned().collect(),
            employment_type: record.employment_type,
            auth_time: grant.issued_at.timestamp(),
        })
    }

    pub fn outstanding_codes(&self) -> usize {
        self.codes.lock().unwrap().len()
    }
}

#[derive(Debug, Deserialize)]
struct AuthorizeParams {
    client_id: String,
    redirect_uri: String,
    state: String,
    #[serde(default)]
    response_type: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct LoginForm {
    pub user: String,
    pub password: String,
    pub client_id: String,
    pub redirect_uri: String,
    pub state: String,
}

#[derive(Debug, Deserialize)]
struct TokenForm {
    #[serde(default)]
    grant_type: String,
    code: String,
    client_id: String,
    client_secret: String,
    #[serde(default)]
    redirect_uri: Option<String>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn login_page(p: &AuthorizeParams, error: Option<&str>) -> Html<String> {
    let err = error.map_or(String::new(), |e| format!("<p class=\"error\">{}</p>", escape(e)));
    Html(format!(
        "<!doctype html><title>Sign in</title>{err}\
         <form method=\"post\" action=\"/login\">\
         <input name=\"user\"><input name=\"password\" type=\"password\">\
         <input type=\"hidden\" name=\"client_id\" value=\"{}\">\
         <input type=\"hidden\" name=\"redirect_uri\" value=\"{}\">\
         <input type=\"hidden\" name=\"state\" value=\"{}\">\
         <button>Sign in</button></form>",
        escape(&p.client_id),
        escape(&p.redirect_uri),
        escape(&p.state)
    ))
}

async fn authorize(State(core): State<Arc<IdpCore>>, Query(p): Query<AuthorizeParams>) -> Response {
    if !core.is_registered(&p.client_id) {
        return (StatusCode::BAD_REQUEST, "unknown client_id").into_response();
    }
    if p.response_type.as_deref().is_some_and(|t| t != "code") {
        return (StatusCode::BAD_REQUEST, "unsupported response_type").into_response();
    }
    let mut target = url::Url::parse("http://idp.invalid/login").expect("static url");
    target
        .query_pairs_mut()
        .append_pair("client_id", &p.client_id)
        .append_pair("redirect_uri", &p.redirect_uri)
        .append_pair("state", &p.state);
    let location = format!("/login?{}", target.query().unwrap_or(""));
    (StatusCode::FOUND, [(header::LOCATION, location)]).into_response()
}

async fn login_form(State(core): State<Arc<IdpCore>>, Query(p): Query<AuthorizeParams>) -> Response {
    if !core.is_registered(&p.client_id) {
        return (StatusCode::BAD_REQUEST, "unknown client_id").into_response();
    }
    login_page(&p, None).into_response()
}

async fn login_submit(State(core): State<Arc<IdpCore>>, Form(f): Form<LoginForm>) -> Response {
    let params = AuthorizeParams {
        client_id: f.client_id.clone(),
        redirect_uri: f.redirect_uri.clone(),
        state: f.state.clone(),
        response_type: None,
    };
    match core.login(&f.client_id, &f.redirect_uri, &f.user, &f.password) {
        Ok(code) => {
            let Ok(mut back) = url::Url::parse(&f.redirect_uri) else {
                return (StatusCode::BAD_REQUEST, "bad redirect_uri").into_response();
            };
            back.query_pairs_mut()
                .append_pair("code", &code)
                .append_pair("state", &f.state);
            (StatusCode::FOUND, [(header::LOCATION, back.to_string())]).into_response()
        }
        Err(LoginError::UnknownClient) => (StatusCode::BAD_REQUEST, "unknown client_id").into_response(),
        Err(LoginError::BadCredentials) => {
            (StatusCode::OK, login_page(&params, Some("invalid username or password"))).into_response()
        }
        Err(LoginError::Inactive) => (StatusCode::FORBIDDEN, "account disabled").into_response(),
    }
}

async fn token(State(core): State<Arc<IdpCore>>, Form(f): Form<TokenForm>) -> Response {
    if f.grant_type != "authorization_code" {
        return (
            StatusCode::BAD_REQUEST,
            Json(serde_json::json!({ "error": "unsupported_grant_type" })),
        )
            .into_response();
    }
    match core.exchange(&f.code, &f.client_id, &f.client_secret, f.redirect_uri.as_deref()) {
        Ok(a) => Json(a).into_response(),
        Err(TokenError::InvalidClient) => (
            StatusCode::UNAUTHORIZED,
            Json(serde_json::json!({ "error": "invalid_client" })),
        )
            .into_response(),
        Err(TokenError::InvalidGrant) => (
            StatusCode::BAD_REQUEST,
            Json(serde_json::json!({ "error": "invalid_grant" })),
        )
            .into_response(),
    }
}

pub fn router(core: Arc<IdpCore>) -> Router {
    Router::new()
        .route("/authorize", get(authorize))
        .route("/login", get(login_form).post(login_submit))
        .route("/token", post(token))
        .with_state(core)
}
