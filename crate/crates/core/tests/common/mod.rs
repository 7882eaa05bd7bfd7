//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::IpAddr;

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use zta::authn::{EmploymentType, GeoPoint, LoginEvent, Session};
use zta::control_plane::LogQuery;
use zta::observe::{AccessLogRecord, LogOutcome};
use zta::policy::{PolicySnapshot, RouteKind, RoutePolicy};
use zta::tls_gate::TlsClientInfo;

pub const KM_PER_RADIAN: f64 = 6371.0;

/// Great-circle distance from the angle between unit vectors, computed with
/// atan2 so it stays accurate near 0 and near pi.
pub fn great_circle_oracle(a: GeoPoint, b: GeoPoint) -> f64 {
    let v = |p: GeoPoint| {
        let (lat, lon) = (p.lat.to_radians(), p.lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    };
    let (u, w) = (v(a), v(b));
    let cross = [
        u[1] * w[2] - u[2] * w[1],
        u[2] * w[0] - u[0] * w[2],
        u[0] * w[1] - u[1] * w[0],
    ];
    let cross_len = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    let dot = u[0] * w[0] + u[1] * w[1] + u[2] * w[2];
    KM_PER_RADIAN * cross_len.atan2(dot)
}

pub const CASE_HOST: &str = "app.corp.test";
pub const FACTORS: [&str; 7] = [
    "kill_switch",
    "revoked_cert",
    "unknown_host",
    "employment_denied",
    "group_denied",
    "session_too_old",
    "impossible_travel",
];

pub fn case_now() -> DateTime<Utc> {
    DateTime::from_timestamp(1_760_000_000, 0).unwrap()
}

/// Bit i of `case` switches on failure factor `FACTORS[i]`.
pub struct DecisionCase {
    pub snapshot: PolicySnapshot,
    pub host: String,
    pub session: Session,
    pub client: TlsClientInfo,
    pub now: DateTime<Utc>,
}

pub fn decision_case(case: u8) -> DecisionCase {
    let on = |i: u8| case & (1 << i) != 0;
    let now = case_now();
    let fp = "c".repeat(64);
    let mut snapshot = PolicySnapshot::empty(42, now);
    snapshot.kill_switch = on(0);
    if on(1) {
        snapshot.revoked_fingerprints.insert(fp.clone());
    }
    snapshot.routes.insert(
        CASE_HOST.into(),
        RoutePolicy {
            host: CASE_HOST.into(),
            upstream: "127.0.0.1:9".into(),
            kind: RouteKind::Http,
            required_groups: BTreeSet::from(["eng".to_string()]),
            allowed_employment: BTreeSet::from([EmploymentType::Fte]),
            session_max_age_s: 3600,
        },
    );
    let london = GeoPoint::new(51.5074, -0.1278);
    let nyc = GeoPoint::new(40.7128, -74.0060);
    let event = |secs_ago: i64, geo: GeoPoint| LoginEvent {
        at: now - Duration::seconds(secs_ago),
        source_ip: "127.0.0.1".parse().unwrap(),
        geo: Some(geo),
    };
    let created_ago = if on(5) { 7200 } else { 600 };
    let session = Session {
        session_id: format!("case-{case}"),
        user_id: "u".into(),
        groups: vec![if on(4) { "sales" } else { "eng" }.into()],
        employment_type: if on(3) { EmploymentType::Contractor } else { EmploymentType::Fte },
        device_fingerprint: fp.clone(),
        created_at: now - Duration::seconds(created_ago),
        expires_at: now + Duration::hours(8),
        login_events: vec![
            event(created_ago + 60, london),
            event(created_ago, if on(6) { nyc } else { london }),
        ],
    };
    DecisionCase {
        snapshot,
        host: if on(2) { "other.corp.test" } else { CASE_HOST }.into(),
        session,
        client: TlsClientInfo {
            fingerprint: fp,
            subject_cn: "laptop".into(),
            validated_at: now,
            peer_ip: "127.0.0.1".parse().unwrap(),
        },
        now,
    }
}

/// First failing factor in table order, or "ok".
pub fn oracle_reason(case: u8) -> &'static str {
    (0..7).find(|i| case & (1 << i) != 0).map_or("ok", |i| FACTORS[i as usize])
}

pub const USERS: [&str; 4] = ["alice", "bob", "carol", "dave"];
pub const HOSTS: [&str; 4] = ["app1.corp.test", "app2.corp.test", "bastion.corp.test", "wiki.corp.test"];
pub const REASONS: [&str; 4] = ["ok", "kill_switch", "unknown_host", "employment_denied"];

pub fn random_record<R: Rng>(rng: &mut R, gateway: &str, sequence: u64, base: DateTime<Utc>) -> AccessLogRecord {
    let outcome = *[LogOutcome::Allow, LogOutcome::Deny, LogOutcome::Error].choose(rng).unwrap();
    AccessLogRecord {
        // Coarse timestamps so ties on time are common.
        timestamp: base + Duration::seconds(rng.gen_range(0..2_000)),
        gateway_id: gateway.into(),
        sequence,
        fingerprint: rng.gen_bool(0.9).then(|| format!("{:064x}", rng.gen_range(0..6u8))),
        user_id: rng.gen_bool(0.8).then(|| USERS.choose(rng).unwrap().to_string()),
        source_ip: IpAddr::from([127, 0, 0, rng.gen_range(1..4)]),
        host: HOSTS.choose(rng).unwrap().to_string(),
        path: "/".into(),
        outcome,
        reason: REASONS.choose(rng).unwrap().to_string(),
        policy_version: Some(rng.gen_range(1..20)),
        latency_us: rng.gen_range(0..10_000),
    }
}

pub fn random_query<R: Rng>(rng: &mut R, base: DateTime<Utc>) -> LogQuery {
    LogQuery {
        user: rng.gen_bool(0.4).then(|| USERS.choose(rng).unwrap().to_string()),
        fingerprint: rng.gen_bool(0.3).then(|| format!("{:064x}", rng.gen_range(0..6u8))),
        host: rng.gen_bool(0.4).then(|| HOSTS.choose(rng).unwrap().to_string()),
        outcome: rng
            .gen_bool(0.4)
            .then(|| *[LogOutcome::Allow, LogOutcome::Deny, LogOutcome::Error].choose(rng).unwrap()),
        since: rng.gen_bool(0.5).then(|| base + Duration::seconds(rng.gen_range(0..2_000))),
        limit: rng.gen_bool(0.7).then(|| rng.gen_range(1..3_000)),
    }
}

/// Linear scan: filter every record, sort newest first, truncate.
pub fn naive_query(records: &[AccessLogRecord], q: &LogQuery) -> Vec<(String, u64)> {
    let mut hits: Vec<&AccessLogRecord> = records
        .iter()
        .filter(|r| {
            let user_ok = match &q.user {
                Some(u) => r.user_id.as_deref() == Some(u.as_str()),
                None => true,
            };
            let fp_ok = match &q.fingerprint {
                Some(f) => r.fingerprint.as_deref() == Some(f.as_str()),
                None => true,
            };
            let host_ok = q.host.as_deref().is_none_or(|h| r.host == h);
            let outcome_ok = q.outcome.is_none_or(|o| r.outcome == o);
            let since_ok = q.since.is_none_or(|s| r.timestamp >= s);
            user_ok && fp_ok && host_ok && outcome_ok && since_ok
        })
        .collect();
    hits.sort_by(|a, b| {
        b.timestamp
            .cmp(&a.timestamp)
            .then(b.sequence.cmp(&a.sequence))
            .then(a.gateway_id.cmp(&b.gateway_id))
    });
    hits.truncate(q.limit.unwrap_or(100));
    hits.into_iter().map(|r| (r.gateway_id.clone(), r.sequence)).collect()
}
