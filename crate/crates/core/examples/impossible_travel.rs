//! Great-circle distance and the implied-speed check between consecutive
//! logins.

use zta::authn::GeoPoint;
use zta::policy::{haversine_km, DEFAULT_VELOCITY_LIMIT_KMH};

fn main() -> anyhow::Result<()> {
    let cities = [
        ("London", GeoPoint::new(51.5074, -0.1278)),
        ("New York", GeoPoint::new(40.7128, -74.0060)),
        ("Tokyo", GeoPoint::new(35.6762, 139.6503)),
        ("Sydney", GeoPoint::new(-33.8688, 151.2093)),
    ];
    for (i, (a, pa)) in cities.iter().enumerate() {
        for (b, pb) in &cities[i + 1..] {
            let km = haversine_km(*pa, *pb)?;
            // Shortest gap between logins that stays under the limit.
            let min_hours = km / DEFAULT_VELOCITY_LIMIT_KMH;
            println!("{a:>8} -> {b:<8} {km:>8.1} km, plausible after {min_hours:.1} h");
        }
    }
    let (london, nyc) = (cities[0].1, cities[1].1);
    for minutes in [10.0, 60.0, 480.0] {
        let speed = haversine_km(london, nyc)? / (minutes / 60.0);
        let verdict = if speed > DEFAULT_VELOCITY_LIMIT_KMH { "impossible" } else { "fine" };
        println!("London then New York {minutes:>3} min later: {speed:>7.0} km/h, {verdict}");
    }
    Ok(())
}
