use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pki::{PkiError, RevocationList};
use crate::policy::{FieldError, PolicySnapshot, RoutePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub version: u64,
    pub actor: String,
    pub change: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub current: PolicySnapshot,
    pub revocations: RevocationList,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("validation failed")]
    Invalid(Vec<FieldError>),
    #[error("state file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("state file {path} is corrupt: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Initial snapshot settings applied when no state file exists yet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialSettings {
    pub geo_velocity_limit_kmh: f64,
    pub max_staleness_s: u64,
}

impl Default for InitialSettings {
    fn default() -> Self {
        Self {
            geo_velocity_limit_kmh: crate::policy::DEFAULT_VELOCITY_LIMIT_KMH,
            max_staleness_s: crate::policy::DEFAULT_MAX_STALENESS_S,
        }
    }
}

/// Authoritative policy state. Every mutation bumps the version by one and
/// is persisted before it becomes visible.
#[derive(Debug)]
pub struct PolicyStore {
    path: Option<PathBuf>,
    state: StoreState,
}

impl PolicyStore {
    pub fn in_memory(settings: InitialSettings, now: DateTime<Utc>) -> Self {
        let mut current = PolicySnapshot::empty(1, now);
        current.geo_velocity_limit_kmh = settings.geo_velocity_limit_kmh;
        current.max_staleness_s = settings.max_staleness_s;
        Self {
            path: None,
            state: StoreState {
                current,
                revocations: RevocationList::new(),
                history: vec![HistoryEntry {
                    version: 1,
                    actor: "system".into(),
                    change: "initialize".into(),
                    at: now,
                }],
            },
        }
    }

    /// Loads `path` if it exists, otherwise creates and persists a fresh store.
    pub fn open(path: &Path, settings: InitialSettings, now: DateTime<Utc>) -> Result<Self, StoreError> {
        if path.exists() {
            return Self::load(path);
        }
        let mut store = Self::in_memory(settings, now);
        store.path = Some(path.to_path_buf());
        store.save()?;
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let state = serde_json::from_slice(&bytes).map_err(|source| StoreError::Corrupt {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            state,
        })
    }

    fn save_state(&self, state: &StoreState) -> Result<(), StoreError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let bytes = serde_json::to_vec_pretty(state).expect("state serializes");
        crate::util::write_atomic(path, &bytes).map_err(|source| StoreError::Io {
            path: path.clone(),
            source,
        })
    }

    pub fn save(&self) -> Result<(), StoreError> {
        self.save_state(&self.state)
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn current(&self) -> &PolicySnapshot {
        &self.state.current
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.state.history
    }

    pub fn revocations(&self) -> &RevocationList {
        &self.state.revocations
    }

    fn commit(
        &mut self,
        actor: &str,
        change: String,
        now: DateTime<Utc>,
        apply: impl FnOnce(&mut StoreState) -> Result<(), StoreError>,
    ) -> Result<u64, StoreError> {
        let mut next = self.state.clone();
        apply(&mut next)?;
        let version = self.state.current.version + 1;
        next.current.version = version;
        next.current.generated_at = now;
        next.current.revoked_fingerprints =
            next.revocations.fingerprints().map(str::to_string).collect();
        next.history.push(HistoryEntry {
            version,
            actor: actor.to_string(),
            change,
            at: now,
        });
        self.save_state(&next)?;
        self.state = next;
        Ok(version)
    }

    pub fn set_kill_switch(&mut self, enabled: bool, actor: &str, now: DateTime<Utc>) -> Result<u64, StoreError> {
        let was = self.state.current.kill_switch;
        let change = match (was, enabled) {
            (false, true) => "kill_switch enabled".to_string(),
            (true, false) => "kill_switch disabled".to_string(),
            (_, e) => format!("no-op: kill_switch already {}", if e { "enabled" } else { "disabled" }),
        };
        self.commit(actor, change, now, |s| {
            s.current.kill_switch = enabled;
            Ok(())
        })
    }

    pub fn upsert_route(&mut self, route: RoutePolicy, actor: &str, now: DateTime<Utc>) -> Result<u64, StoreError> {
        let errors = route.validate();
        if !errors.is_empty() {
            return Err(StoreError::Invalid(errors));
        }
        let change = match self.state.current.routes.get(&route.host) {
            None => format!("route {} inserted", route.host),
            Some(old) if old == &route => format!("no-op: route {} unchanged", route.host),
            Some(_) => format!("route {} updated", route.host),
        };
        self.commit(actor, change, now, |s| {
            s.current.routes.insert(route.host.clone(), route);
            Ok(())
        })
    }

    pub fn add_revocation(
        &mut self,
        fingerprint: &str,
        reason: &str,
        actor: &str,
        now: DateTime<Utc>,
    ) -> Result<u64, StoreError> {
        let revocations = self.state.revocations.revoke(fingerprint, reason, now).map_err(|e| {
            let message = match e {
                PkiError::MalformedFingerprint(_) => "must be 64 lowercase hex characters".to_string(),
                other => other.to_string(),
            };
            StoreError::Invalid(vec![FieldError::new("fingerprint", message)])
        })?;
        let change = if self.state.revocations.contains(fingerprint) {
            format!("no-op: {fingerprint} already revoked")
        } else {
            format!("revoked {fingerprint}: {reason}")
        };
        self.commit(actor, change, now, |s| {
            s.revocations = revocations;
            Ok(())
        })
    }
}
