//! JSON configuration files for the gateway and the control plane.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::authn::{IdpConfig, DEFAULT_SESSION_TTL_SECS};
use crate::policy::DEFAULT_POLL_INTERVAL_S;
use crate::token::DEFAULT_TOKEN_TTL_SECS;

pub use crate::control_plane::ControlPlaneConfig;

pub const DEFAULT_HEADER_LIMIT_BYTES: usize = 16 * 1024;
pub const DEFAULT_UPSTREAM_CONNECT_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub gateway_id: String,
    /// PEM of the device CA root.
    pub trust_root_path: PathBuf,
    pub server_cert_path: PathBuf,
    pub server_key_path: PathBuf,
    /// PKCS#8 PEM Ed25519 key used to mint identity tokens.
    pub signing_key_path: PathBuf,
    /// Still published during a rotation window.
    #[serde(default)]
    pub previous_signing_key_path: Option<PathBuf>,
    pub control_plane_url: String,
    #[serde(default)]
    pub control_plane_token: Option<String>,
    pub idp: IdpConfig,
    #[serde(default)]
    pub geo_db_path: Option<PathBuf>,
    #[serde(default = "default_poll_interval")]
    pub poll_interval_s: u64,
    #[serde(default = "default_header_limit")]
    pub header_limit_bytes: usize,
    #[serde(default = "default_log_path")]
    pub log_path: PathBuf,
    #[serde(default = "default_dead_letter_path")]
    pub dead_letter_path: PathBuf,
    #[serde(default = "default_token_ttl")]
    pub token_ttl_s: i64,
    #[serde(default = "default_session_ttl")]
    pub session_ttl_s: i64,
    #[serde(default)]
    pub session_journal_path: Option<PathBuf>,
    #[serde(default = "default_connect_timeout")]
    pub upstream_connect_timeout_ms: u64,
}

fn default_poll_interval() -> u64 {
    DEFAULT_POLL_INTERVAL_S
}

fn default_header_limit() -> usize {
    DEFAULT_HEADER_LIMIT_BYTES
}

fn default_log_path() -> PathBuf {
    PathBuf::from(crate::observe::DEFAULT_LOG_FILE)
}

fn default_dead_letter_path() -> PathBuf {
    PathBuf::from("access.deadletter.jsonl")
}

fn default_token_ttl() -> i64 {
    DEFAULT_TOKEN_TTL_SECS
}

fn default_session_ttl() -> i64 {
    DEFAULT_SESSION_TTL_SECS
}

fn default_connect_timeout() -> u64 {
    DEFAULT_UPSTREAM_CONNECT_TIMEOUT_MS
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let bytes = std::fs::read(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = load_json(path)?;
        let invalid = |message: &str| ConfigError::Invalid {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if cfg.poll_interval_s == 0 {
            return Err(invalid("poll_interval_s must be positive"));
        }
        if cfg.token_ttl_s <= 0 || cfg.session_ttl_s <= 0 {
            return Err(invalid("token_ttl_s and session_ttl_s must be positive"));
        }
        if cfg.gateway_id.is_empty() {
            return Err(invalid("gateway_id must not be empty"));
        }
        Ok(cfg)
    }
}
