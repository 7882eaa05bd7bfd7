use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use tokio_util::sync::CancellationToken;

use crate::authn::Session;
use crate::policy::{evaluate, AccessDecision, Freshness, PolicyState, Reason, RouteKind};
use crate::tls_gate::TlsClientInfo;

#[derive(Debug)]
struct Entry {
    host: String,
    session: Session,
    client: TlsClientInfo,
    cancel: CancellationToken,
}

/// Live CONNECT tunnels, re-checked whenever policy is polled.
#[derive(Debug, Default)]
pub struct TunnelRegistry {
    next_id: AtomicU64,
    entries: Mutex<HashMap<u64, Entry>>,
}

/// Removes its tunnel from the registry when dropped.
#[derive(Debug)]
pub struct TunnelGuard {
    id: u64,
    registry: Arc<TunnelRegistry>,
    cancel: CancellationToken,
}

impl TunnelGuard {
    pub fn cancelled(&self) -> tokio_util::sync::WaitForCancellationFuture<'_> {
        self.cancel.cancelled()
    }
}

impl Drop for TunnelGuard {
    fn drop(&mut self) {
        self.registry.entries.lock().unwrap().remove(&self.id);
    }
}

/// The decision a tunnel would get if it were opened now.
pub fn tunnel_decision(
    policy: &PolicyState,
    host: &str,
    session: &Session,
    client: &TlsClientInfo,
    now: DateTime<Utc>,
) -> AccessDecision {
    let pinned = policy.pin(now);
    let version = pinned.version().unwrap_or(0);
    let Some(snapshot) = pinned.snapshot.filter(|_| pinned.freshness == Freshness::Fresh) else {
        return AccessDecision::deny(Reason::StalePolicyFailClosed, version);
    };
    let decision = evaluate(&snapshot, host, session, client, now);
    let is_tunnel = snapshot
        .routes
        .get(host)
        .is_some_and(|r| r.kind == RouteKind::TcpTunnel);
    if decision.is_allow() && !is_tunnel {
        return AccessDecision::deny(Reason::UnknownHost, version);
    }
    decision
}

impl TunnelRegistry {
    pub fn register(self: &Arc<Self>, host: &str, session: Session, client: TlsClientInfo) -> TunnelGuard {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let cancel = CancellationToken::new();
        self.entries.lock().unwrap().insert(
            id,
            Entry {
                host: host.to_string(),
                session,
                client,
                cancel: cancel.clone(),
            },
        );
        TunnelGuard {
            id,
            registry: self.clone(),
            cancel,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cancels every tunnel the current policy no longer admits. Returns the
    /// number cancelled.
    pub fn sweep(&self, policy: &PolicyState, now: DateTime<Utc>) -> usize {
        let entries = self.entries.lock().unwrap();
        let mut cancelled = 0;
        for e in entries.values() {
            if e.cancel.is_cancelled() {
                continue;
            }
            let d = tunnel_decision(policy, &e.host, &e.session, &e.client, now);
            if !d.is_allow() {
                tracing::info!(host = %e.host, user = %e.session.user_id, reason = %d.reason, "tearing down tunnel");
                e.cancel.cancel();
                cancelled += 1;
            }
        }
        cancelled
    }

    pub fn cancel_all(&self) {
        for e in self.entries.lock().unwrap().values() {
            e.cancel.cancel();
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::authn::{EmploymentType, LoginEvent};
    use crate::policy::{PolicySnapshot, RoutePolicy};

    fn now() -> DateTime<Utc> {
        DateTime::from_timestamp(1_760_000_000, 0).unwrap()
    }

    fn session() -> Session {
        Session {
            session_id: "s".into(),
            user_id: "alice".into(),
            groups: vec!["eng".into()],
            employment_type: EmploymentType::Fte,
            device_fingerprint: "a".repeat(64),
            created_at: now(),
            expires_at: now() + chrono::Duration::hours(8),
            login_events: vec![LoginEvent {
                at: now(),
                source_ip: "127.0.0.1".parse().unwrap(),
                geo: None,
            }],
        }
    }

    fn client() -> TlsClientInfo {
        TlsClientInfo {
            fingerprint: "a".repeat(64),
            subject_cn: "laptop-001".into(),
            validated_at: now(),
            peer_ip: "127.0.0.1".parse().unwrap(),
        }
    }

    fn snapshot(version: u64, kill: bool) -> PolicySnapshot {
        let mut s = PolicySnapshot::empty(version, now());
        s.kill_switch = kill;
        s.routes.insert(
            "bastion.corp.test".into(),
            RoutePolicy {
                host: "bastion.corp.test".into(),
                upstream: "127.0.0.1:22".into(),
                kind: RouteKind::TcpTunnel,
                required_groups: BTreeSet::new(),
                allowed_employment: BTreeSet::from([EmploymentType::Fte]),
                session_max_age_s: 3600,
            },
        );
        s
    }

    #[test]
    fn sweep_cancels_on_kill_switch_and_guard_unregisters() {
        let policy = PolicyState::new();
        policy.install(snapshot(1, false)).unwrap();
        policy.mark_success(now());
        let reg = Arc::new(TunnelRegistry::default());
        let guard = reg.register("bastion.corp.test", session(), client());
        assert_eq!(reg.sweep(&policy, now()), 0);
        assert!(!guard.cancel.is_cancelled());
        policy.install(snapshot(2, true)).unwrap();
        assert_eq!(reg.sweep(&policy, now()), 1);
        assert!(guard.cancel.is_cancelled());
        assert_eq!(reg.len(), 1);
        drop(guard);
        assert!(reg.is_empty());
    }

    #[test]
    fn http_route_is_not_tunnelable() {
        let policy = PolicyState::new();
        let mut s = snapshot(1, false);
        s.routes.get_mut("bastion.corp.test").unwrap().kind = RouteKind::Http;
        policy.install(s).unwrap();
        policy.mark_success(now());
        let d = tunnel_decision(&policy, "bastion.corp.test", &session(), &client(), now());
        assert_eq!(d.reason, Reason::UnknownHost);
    }

    #[test]
    fn stale_policy_tears_down() {
        let policy = PolicyState::new();
        policy.install(snapshot(1, false)).unwrap();
        policy.mark_success(now());
        let reg = Arc::new(TunnelRegistry::default());
        let _g = reg.register("bastion.corp.test", session(), client());
        assert_eq!(reg.sweep(&policy, now() + chrono::Duration::seconds(301)), 1);
    }
}
