//! Policy snapshots and the per-request decision function.
//!
//! The control plane publishes versioned [`PolicySnapshot`]s. Each gateway
//! polls for them, swaps the active snapshot atomically and evaluates every
//! request against exactly one snapshot. Without a recent successful poll the
//! gateway fails closed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authn::{EmploymentType, GeoPoint, Session};
use crate::clock::SharedClock;
use crate::control_plane::client::{ControlPlaneClient, PolicyFetch};
use crate::tls_gate::TlsClientInfo;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_VELOCITY_LIMIT_KMH: f64 = 900.0;
pub const DEFAULT_MAX_STALENESS_S: u64 = 300;
pub const DEFAULT_POLL_INTERVAL_S: u64 = 5;
/// Minimum time between two logins when computing speed: one second.
const MIN_TRAVEL_HOURS: f64 = 1.0 / 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RouteKind {
    Http,
    TcpTunnel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutePolicy {
    pub host: String,
    pub upstream: String,
    pub kind: RouteKind,
    /// Any-of. Empty admits every authenticated user.
    #[serde(default)]
    pub required_groups: BTreeSet<String>,
    pub allowed_employment: BTreeSet<EmploymentType>,
    pub session_max_age_s: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// Lowercase LDH hostname.
pub fn is_valid_dns_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 253
        && name.split('.').all(|label| {
            !label.is_empty()
                && label.len() <= 63
                && !label.starts_with('-')
                && !label.ends_with('-')
                && label
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        })
}

fn is_valid_upstream(addr: &str) -> bool {
    match addr.rsplit_once(':') {
        Some((host, port)) => !host.is_empty() && port.parse::<u16>().is_ok_and(|p| p != 0),
        None => false,
    }
}

impl RoutePolicy {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if !is_valid_dns_name(&self.host) {
            errors.push(FieldError::new("host", "must be a lowercase DNS name"));
        }
        if !is_valid_upstream(&self.upstream) {
            errors.push(FieldError::new("upstream", "must be host:port"));
        }
        if self.allowed_employment.is_empty() {
            errors.push(FieldError::new(
                "allowed_employment",
                "must contain at least one of FTE, CONTRACTOR",
            ));
        }
        if self.session_max_age_s == 0 {
            errors.push(FieldError::new("session_max_age_s", "must be positive"));
        }
        if self.required_groups.iter().any(String::is_empty) {
            errors.push(FieldError::new("required_groups", "group names must be nonempty"));
        }
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub version: u64,
    pub generated_at: DateTime<Utc>,
    pub kill_switch: bool,
    pub revoked_fingerprints: BTreeSet<String>,
    pub routes: BTreeMap<String, RoutePolicy>,
    pub geo_velocity_limit_kmh: f64,
    pub max_staleness_s: u64,
}

impl PolicySnapshot {
    pub fn empty(version: u64, generated_at: DateTime<Utc>) -> Self {
        Self {
            version,
            generated_at,
            kill_switch: false,
            revoked_fingerprints: BTreeSet::new(),
            routes: BTreeMap::new(),
            geo_velocity_limit_kmh: DEFAULT_VELOCITY_LIMIT_KMH,
            max_staleness_s: DEFAULT_MAX_STALENESS_S,
        }
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        for (host, route) in &self.routes {
            if host != &route.host {
                errors.push(FieldError::new(
                    &format!("routes.{host}.host"),
                    "must equal the map key",
                ));
            }
            errors.extend(route.validate().into_iter().map(|e| FieldError {
                field: format!("routes.{host}.{}", e.field),
                message: e.message,
            }));
        }
        if !(self.geo_velocity_limit_kmh.is_finite() && self.geo_velocity_limit_kmh > 0.0) {
            errors.push(FieldError::new("geo_velocity_limit_kmh", "must be positive"));
        }
        if self.max_staleness_s == 0 {
            errors.push(FieldError::new("max_staleness_s", "must be positive"));
        }
        if let Some(bad) = self
            .revoked_fingerprints
            .iter()
            .find(|fp| !crate::util::is_fingerprint(fp))
        {
            errors.push(FieldError::new(
                "revoked_fingerprints",
                format!("malformed fingerprint {bad:?}"),
            ));
        }
        errors
    }

    /// Canonical wire form: fixed field order, sorted maps and sets.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn etag(&self) -> String {
        format!("\"{}\"", self.version)
    }
}

/// Parses an ETag / If-None-Match value carrying a decimal version.
pub fn parse_etag(value: &str) -> Option<u64> {
    let v = value.trim();
    let v = v.strip_prefix("W/").unwrap_or(v);
    v.trim_matches('"').parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Outcome {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Ok,
    KillSwitch,
    RevokedCert,
    UnknownHost,
    GroupDenied,
    EmploymentDenied,
    SessionTooOld,
    ImpossibleTravel,
    NoSession,
    DeviceMismatch,
    StalePolicyFailClosed,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::KillSwitch => "kill_switch",
            Self::RevokedCert => "revoked_cert",
            Self::UnknownHost => "unknown_host",
            Self::GroupDenied => "group_denied",
            Self::EmploymentDenied => "employment_denied",
            Self::SessionTooOld => "session_too_old",
            Self::ImpossibleTravel => "impossible_travel",
            Self::NoSession => "no_session",
            Self::DeviceMismatch => "device_mismatch",
            Self::StalePolicyFailClosed => "stale_policy_fail_closed",
        }
    }
}

impl std::fmt::Display for Reason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessDecision {
    pub outcome: Outcome,
    pub reason: Reason,
    pub policy_version: u64,
}

impl AccessDecision {
    pub fn allow(policy_version: u64) -> Self {
        Self {
            outcome: Outcome::Allow,
            reason: Reason::Ok,
            policy_version,
        }
    }

    pub fn deny(reason: Reason, policy_version: u64) -> Self {
        debug_assert_ne!(reason, Reason::Ok);
        Self {
            outcome: Outcome::Deny,
            reason,
            policy_version,
        }
    }

    pub fn is_allow(&self) -> bool {
        self.outcome == Outcome::Allow
    }
}

/// The decision function. Checks run in a fixed order and the first failing
/// one determines the reason.
pub fn evaluate(
    snapshot: &PolicySnapshot,
    host: &str,
    session: &Session,
    client: &TlsClientInfo,
    now: DateTime<Utc>,
) -> AccessDecision {
    let v = snapshot.version;
    if snapshot.kill_switch {
        return AccessDecision::deny(Reason::KillSwitch, v);
    }
    if snapshot.revoked_fingerprints.contains(&client.fingerprint) {
        return AccessDecision::deny(Reason::RevokedCert, v);
    }
    let Some(route) = snapshot.routes.get(host) else {
        return AccessDecision::deny(Reason::UnknownHost, v);
    };
    if !route.allowed_employment.contains(&session.employment_type) {
        return AccessDecision::deny(Reason::EmploymentDenied, v);
    }
    if !route.required_groups.is_empty()
        && !session.groups.iter().any(|g| route.required_groups.contains(g))
    {
        return AccessDecision::deny(Reason::GroupDenied, v);
    }
    let max_age = Duration::seconds(i64::try_from(route.session_max_age_s).unwrap_or(i64::MAX));
    if now - session.created_at > max_age {
        return AccessDecision::deny(Reason::SessionTooOld, v);
    }
    if impossible_travel(session, snapshot.geo_velocity_limit_kmh) {
        return AccessDecision::deny(Reason::ImpossibleTravel, v);
    }
    AccessDecision::allow(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("coordinate out of range: lat {lat}, lon {lon}")]
pub struct GeoRangeError {
    pub lat: f64,
    pub lon: f64,
}

fn check_point(p: GeoPoint) -> Result<(), GeoRangeError> {
    if (-90.0..=90.0).contains(&p.lat) && (-180.0..=180.0).contains(&p.lon) {
        Ok(())
    } else {
        Err(GeoRangeError {
            lat: p.lat,
            lon: p.lon,
        })
    }
}

/// Great-circle distance on a sphere of radius 6371 km.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> Result<f64, GeoRangeError> {
    check_point(a)?;
    check_point(b)?;
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin())
}

/// True when two consecutive geolocated logins imply travel faster than
/// `limit_kmh`. Logins without a location are skipped.
pub fn impossible_travel(session: &Session, limit_kmh: f64) -> bool {
    let located: Vec<_> = session
        .login_events
        .iter()
        .filter_map(|e| e.geo.map(|g| (e.at, g)))
        .collect();
    located.windows(2).any(|pair| {
        let ((t1, g1), (t2, g2)) = (pair[0], pair[1]);
        let Ok(km) = haversine_km(g1, g2) else {
            return false;
        };
        let hours = ((t2 - t1).num_milliseconds() as f64 / 3_600_000.0).max(MIN_TRAVEL_HOURS);
        km / hours > limit_kmh
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freshness {
    Fresh,
    StaleFailClosed,
}

/// Fresh while the last successful poll is at most `max_staleness_s` old.
/// A gateway that has never polled successfully is stale.
pub fn staleness_gate(
    snapshot: Option<&PolicySnapshot>,
    last_success: Option<DateTime<Utc>>,
    now: DateTime<Utc>,
) -> Freshness {
    match (snapshot, last_success) {
        (Some(s), Some(last)) => {
            let max = Duration::seconds(i64::try_from(s.max_staleness_s).unwrap_or(i64::MAX));
            if now - last > max {
                Freshness::StaleFailClosed
            } else {
                Freshness::Fresh
            }
        }
        _ => Freshness::StaleFailClosed,
    }
}

/// A consistent view of the active snapshot for one request.
#[derive(Debug, Clone)]
pub struct PinnedPolicy {
    pub snapshot: Option<Arc<PolicySnapshot>>,
    pub freshness: Freshness,
}

impl PinnedPolicy {
    pub fn version(&self) -> Option<u64> {
        self.snapshot.as_ref().map(|s| s.version)
    }
}

#[derive(Debug, Default)]
struct ActivePolicy {
    snapshot: Option<Arc<PolicySnapshot>>,
    last_success: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("snapshot version {offered} is not newer than installed {current}")]
pub struct StaleVersion {
    pub offered: u64,
    pub current: u64,
}

/// The gateway's active snapshot plus the time of the last good poll.
#[derive(Debug, Default)]
pub struct PolicyState {
    inner: RwLock<ActivePolicy>,
}

impl PolicyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Option<Arc<PolicySnapshot>> {
        self.inner.read().unwrap().snapshot.clone()
    }

    pub fn last_success(&self) -> Option<DateTime<Utc>> {
        self.inner.read().unwrap().last_success
    }

    /// Replaces the active snapshot if `next` is strictly newer.
    pub fn install(&self, next: PolicySnapshot) -> Result<(), StaleVersion> {
        let mut inner = self.inner.write().unwrap();
        if let Some(cur) = &inner.snapshot {
            if next.version <= cur.version {
                return Err(StaleVersion {
                    offered: next.version,
                    current: cur.version,
                });
            }
        }
        inner.snapshot = Some(Arc::new(next));
        Ok(())
    }

    pub fn mark_success(&self, at: DateTime<Utc>) {
        let mut inner = self.inner.write().unwrap();
        inner.last_success = Some(inner.last_success.map_or(at, |prev| prev.max(at)));
    }

    pub fn pin(&self, now: DateTime<Utc>) -> PinnedPolicy {
        let inner = self.inner.read().unwrap();
        PinnedPolicy {
            freshness: staleness_gate(inner.snapshot.as_deref(), inner.last_success, now),
            snapshot: inner.snapshot.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PollOutcome {
    Installed(u64),
    Unchanged,
    Unreachable(String),
    /// The control plane answered with a snapshot that is older than, or
    /// equal to, the installed one, or that fails validation.
    Anomaly(String),
}

/// One conditional fetch of `/v1/policy`.
pub async fn poll_policy(
    client: &ControlPlaneClient,
    state: &PolicyState,
    now: DateTime<Utc>,
) -> PollOutcome {
    let current = state.current().map(|s| s.version);
    match client.fetch_policy(current).await {
        Ok(PolicyFetch::NotModified) => {
            state.mark_success(now);
            PollOutcome::Unchanged
        }
        Ok(PolicyFetch::Modified(snapshot)) => {
            let problems = snapshot.validate();
            if !problems.is_empty() {
                let msg = format!("invalid snapshot v{}: {problems:?}", snapshot.version);
                tracing::error!(%msg, "control-plane anomaly");
                return PollOutcome::Anomaly(msg);
            }
            let version = snapshot.version;
            match state.install(snapshot) {
                Ok(()) => {
                    state.mark_success(now);
                    PollOutcome::Installed(version)
                }
                Err(e) => {
                    tracing::error!(error = %e, "control-plane anomaly");
                    PollOutcome::Anomaly(e.to_string())
                }
            }
        }
        Err(e) => PollOutcome::Unreachable(e.to_string()),
    }
}

/// Polls forever at `interval`, calling `after_poll` with each outcome.
pub async fn run_poller(
    client: ControlPlaneClient,
    state: Arc<PolicyState>,
    interval: StdDuration,
    clock: SharedClock,
    mut after_poll: impl FnMut(&PollOutcome) + Send,
) {
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        let outcome = poll_policy(&client, &state, clock.now()).await;
        match &outcome {
            PollOutcome::Installed(v) => tracing::info!(version = v, "policy snapshot installed"),
            PollOutcome::Unreachable(e) => tracing::warn!(error = %e, "control plane unreachable"),
            _ => {}
        }
        after_poll(&outcome);
    }
}
