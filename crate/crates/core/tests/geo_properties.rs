mod common;

use chrono::{Duration, TimeZone, Utc};
use common::great_circle_oracle;
use proptest::prelude::*;
use zta::authn::{EmploymentType, GeoPoint, LoginEvent, Session};
use zta::policy::{haversine_km, impossible_travel, DEFAULT_VELOCITY_LIMIT_KMH, EARTH_RADIUS_KM};

const LONDON: GeoPoint = GeoPoint::new(51.5074, -0.1278);
const NYC: GeoPoint = GeoPoint::new(40.7128, -74.0060);

fn point() -> impl Strategy<Value = GeoPoint> {
    (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(lat, lon)| GeoPoint::new(lat, lon))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn symmetric(a in point(), b in point()) {
        let (ab, ba) = (haversine_km(a, b).unwrap(), haversine_km(b, a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn triangle_inequality(a in point(), b in point(), c in point()) {
        let d = |x, y| haversine_km(x, y).unwrap();
        prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-6);
    }

    #[test]
    fn agrees_with_vector_oracle(a in point(), b in point()) {
        let ours = haversine_km(a, b).unwrap();
        prop_assert!((ours - great_circle_oracle(a, b)).abs() < 1e-3);
        prop_assert!((0.0..=EARTH_RADIUS_KM * std::f64::consts::PI + 1e-9).contains(&ours));
    }

    #[test]
    fn out_of_range_rejected(lat in 90.0001f64..1000.0, lon in -180.0f64..180.0) {
        prop_assert!(haversine_km(GeoPoint::new(lat, lon), LONDON).is_err());
        prop_assert!(haversine_km(LONDON, GeoPoint::new(0.0, lat + 90.0)).is_err());
    }
}

#[test]
fn london_new_york() {
    let d = haversine_km(LONDON, NYC).unwrap();
    let oracle = great_circle_oracle(LONDON, NYC);
    assert!((d - oracle).abs() <= 10.0, "{d} vs {oracle}");
    assert!((d - 5570.0).abs() <= 10.0, "{d}");
}

#[test]
fn antipodes() {
    let d = haversine_km(GeoPoint::new(0.0, 0.0), GeoPoint::new(0.0, 180.0)).unwrap();
    assert!((d - 6371.0 * std::f64::consts::PI).abs() <= 0.1, "{d}");
}

fn two_logins(gap: Duration) -> Session {
    let t0 = Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap();
    let ev = |at, geo| LoginEvent {
        at,
        source_ip: "127.0.0.1".parse().unwrap(),
        geo: Some(geo),
    };
    Session {
        session_id: "s".into(),
        user_id: "alice".into(),
        groups: vec![],
        employment_type: EmploymentType::Fte,
        device_fingerprint: "a".repeat(64),
        created_at: t0 + gap,
        expires_at: t0 + gap + Duration::hours(8),
        login_events: vec![ev(t0, LONDON), ev(t0 + gap, NYC)],
    }
}

#[test]
fn travel_speed_against_oracle() {
    let km = great_circle_oracle(LONDON, NYC);
    for (gap, minutes) in [(Duration::minutes(10), 10.0), (Duration::hours(8), 480.0)] {
        let speed = km / (minutes / 60.0);
        let expected = speed > DEFAULT_VELOCITY_LIMIT_KMH;
        assert_eq!(impossible_travel(&two_logins(gap), DEFAULT_VELOCITY_LIMIT_KMH), expected, "{speed} km/h");
    }
}
