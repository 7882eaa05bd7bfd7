//! Evaluate access decisions against a policy snapshot. Checks run in a fixed
//! order and the first failure names the reason.

use std::collections::BTreeSet;

use chrono::{Duration, Utc};
use zta::authn::{EmploymentType, GeoPoint, LoginEvent, Session};
use zta::policy::{evaluate, PolicySnapshot, RouteKind, RoutePolicy};
use zta::tls_gate::TlsClientInfo;

fn main() {
    let now = Utc::now();
    let mut snapshot = PolicySnapshot::empty(7, now);
    snapshot.routes.insert(
        "payroll.corp.test".into(),
        RoutePolicy {
            host: "payroll.corp.test".into(),
            upstream: "10.0.0.5:8080".into(),
            kind: RouteKind::Http,
            required_groups: BTreeSet::from(["finance".to_string()]),
            allowed_employment: BTreeSet::from([EmploymentType::Fte]),
            session_max_age_s: 3600,
        },
    );
    let client = TlsClientInfo {
        fingerprint: "e".repeat(64),
        subject_cn: "laptop-007".into(),
        validated_at: now,
        peer_ip: "192.0.2.1".parse().unwrap(),
    };
    let session = |user: &str, groups: &[&str], emp, age_s: i64| Session {
        session_id: format!("s-{user}"),
        user_id: user.into(),
        groups: groups.iter().map(|g| g.to_string()).collect(),
        employment_type: emp,
        device_fingerprint: client.fingerprint.clone(),
        created_at: now - Duration::seconds(age_s),
        expires_at: now + Duration::hours(8),
        login_events: vec![LoginEvent {
            at: now - Duration::seconds(age_s),
            source_ip: client.peer_ip,
            geo: Some(GeoPoint::new(48.8566, 2.3522)),
        }],
    };

    let cases = [
        ("payroll.corp.test", session("fiona", &["finance"], EmploymentType::Fte, 60)),
        ("payroll.corp.test", session("carl", &["finance"], EmploymentType::Contractor, 60)),
        ("payroll.corp.test", session("erin", &["eng"], EmploymentType::Fte, 60)),
        ("payroll.corp.test", session("fiona", &["finance"], EmploymentType::Fte, 7200)),
        ("jira.corp.test", session("fiona", &["finance"], EmploymentType::Fte, 60)),
    ];
    for (host, s) in &cases {
        let d = evaluate(&snapshot, host, s, &client, now);
        println!("{:<6} {:<18} {:?} {} (v{})", s.user_id, host, d.outcome, d.reason.as_str(), d.policy_version);
    }

    snapshot.revoked_fingerprints.insert(client.fingerprint.clone());
    let d = evaluate(&snapshot, "payroll.corp.test", &cases[0].1, &client, now);
    println!("after revoking the laptop: {}", d.reason.as_str());
    snapshot.kill_switch = true;
    let d = evaluate(&snapshot, "payroll.corp.test", &cases[0].1, &client, now);
    println!("with the kill switch on:   {}", d.reason.as_str());
}
