//! HTTP client for the control-plane API, used by gateways and the CLI.

use std::time::Duration;

use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use super::logs::{LogQuery, StoredLog};
use super::{MutationAck, ACTOR_HEADER};
use crate::observe::AccessLogRecord;
use crate::policy::{parse_etag, FieldError, PolicySnapshot, RoutePolicy};

#[derive(Debug)]
pub enum PolicyFetch {
    NotModified,
    Modified(PolicySnapshot),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid control-plane url: {0}")]
    Url(String),
    #[error("control plane unreachable: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("control plane returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("rejected: {0:?}")]
    Invalid(Vec<FieldError>),
    #[error("malformed response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            Self::Status { status, .. } => Some(*status),
            Self::Invalid(_) => Some(422),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LogPostError {
    #[error("control plane returned {0}")]
    Status(u16),
    #[error("control plane unreachable: {0}")]
    Transport(String),
}

#[derive(Debug, Deserialize)]
struct Accepted {
    accepted: usize,
}

#[derive(Debug, Deserialize)]
struct ValidationBody {
    errors: Vec<FieldError>,
}

#[derive(Debug, Serialize)]
struct KillSwitchBody {
    enabled: bool,
}

#[derive(Debug, Serialize)]
struct RevocationBody<'a> {
    fingerprint: &'a str,
    reason: &'a str,
}

#[derive(Debug, Clone)]
pub struct ControlPlaneClient {
    base: Url,
    token: Option<String>,
    actor: Option<String>,
    http: reqwest::Client,
}

impl ControlPlaneClient {
    pub fn new(base_url: &str, token: Option<String>) -> Result<Self, ClientError> {
        let mut base = Url::parse(base_url).map_err(|e| ClientError::Url(e.to_string()))?;
        if !base.path().ends_with('/') {
            base.set_path(&format!("{}/", base.path()));
        }
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(2))
            .timeout(Duration::from_secs(10))
            .build()?;
        Ok(Self {
            base,
            token,
            actor: None,
            http,
        })
    }

    /// Sets the actor recorded in policy history for mutations.
    pub fn with_actor(mut self, actor: &str) -> Self {
        self.actor = Some(actor.to_string());
        self
    }

    pub fn base_url(&self) -> &Url {
        &self.base
    }

    fn url(&self, path: &str) -> Url {
        self.base.join(path).expect("static relative path")
    }

    fn request(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let mut req = self.http.request(method, self.url(path));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        if let Some(a) = &self.actor {
            req = req.header(ACTOR_HEADER, a.as_str());
        }
        req
    }

    async fn error_for(resp: reqwest::Response) -> ClientError {
        let status = resp.status();
        let body = resp.text().await.unwrap_or_default();
        if status == StatusCode::UNPROCESSABLE_ENTITY {
            if let Ok(v) = serde_json::from_str::<ValidationBody>(&body) {
                return ClientError::Invalid(v.errors);
            }
        }
        ClientError::Status {
            status: status.as_u16(),
            body,
        }
    }

    pub async fn fetch_policy(&self, current: Option<u64>) -> Result<PolicyFetch, ClientError> {
        let mut req = self.request(reqwest::Method::GET, "v1/policy");
        if let Some(v) = current {
            req = req.header(reqwest::header::IF_NONE_MATCH, format!("\"{v}\""));
        }
        let resp = req.send().await?;
        match resp.status() {
            StatusCode::NOT_MODIFIED => Ok(PolicyFetch::NotModified),
            StatusCode::OK => {
                let etag = resp
                    .headers()
                    .get(reqwest::header::ETAG)
                    .and_then(|v| v.to_str().ok())
                    .and_then(parse_etag);
                let snapshot: PolicySnapshot = resp.json().await.map_err(|e| ClientError::Decode(e.to_string()))?;
                if etag.is_some_and(|v| v != snapshot.version) {
                    return Err(ClientError::Decode(format!(
                        "etag {etag:?} disagrees with body version {}",
                        snapshot.version
                    )));
                }
                Ok(PolicyFetch::Modified(snapshot))
            }
            _ => Err(Self::error_for(resp).await),
        }
    }

    pub async fn post_logs(&self, batch: &[AccessLogRecord]) -> Result<usize, LogPostError> {
        let resp = self
            .request(reqwest::Method::POST, "v1/logs")
            .json(batch)
            .send()
            .await
            .map_err(|e| LogPostError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LogPostError::Status(status.as_u16()));
        }
        let body: Accepted = resp
            .json()
            .await
            .map_err(|e| LogPostError::Transport(e.to_string()))?;
        Ok(body.accepted)
    }

    async fn mutate(&self, req: reqwest::RequestBuilder) -> Result<MutationAck, ClientError> {
        let resp = req.send().await?;
        if !resp.status().is_success() {
            return Err(Self::error_for(resp).await);
        }
        resp.json().await.map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn set_kill_switch(&self, enabled: bool) -> Result<MutationAck, ClientError> {
        self.mutate(
            self.request(reqwest::Method::POST, "v1/killswitch")
                .json(&KillSwitchBody { enabled }),
        )
        .await
    }

    pub async fn upsert_route(&self, route: &RoutePolicy) -> Result<MutationAck, ClientError> {
        let path = format!("v1/routes/{}", route.host);
        self.mutate(self.request(reqwest::Method::PUT, &path).json(route))
            .await
    }

    pub async fn add_revocation(&self, fingerprint: &str, reason: &str) -> Result<MutationAck, ClientError> {
        self.mutate(
            self.request(reqwest::Method::POST, "v1/revocations")
                .json(&RevocationBody { fingerprint, reason }),
        )
        .await
    }

    pub async fn query_logs(&self, query: &LogQuery) -> Result<Vec<StoredLog>, ClientError> {
        let resp = self
            .request(reqwest::Method::GET, "v1/logs")
            .query(query)
            .send()
            .await?;
        if !resp.status().is_success() {
            return Err(Self::error_for(resp).await);
        }
        resp.json().await.map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn health(&self) -> Result<serde_json::Value, ClientError> {
        let resp = self.request(reqwest::Method::GET, "v1/health").send().await?;
        if !resp.status().is_success() {
            return Err(Self::error_for(resp).await);
        }
        resp.json().await.map_err(|e| ClientError::Decode(e.to_string()))
    }
}
