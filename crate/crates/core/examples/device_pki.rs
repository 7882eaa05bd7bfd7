//! Create a device CA, issue a laptop certificate, and validate it at
//! different points in time.

use chrono::{Duration, Utc};
use zta::pki::CertificateAuthority;
use zta::tls_gate::validate_client_cert;

fn main() -> anyhow::Result<()> {
    let now = Utc::now();
    let mut ca = CertificateAuthority::init(365, now)?;
    let laptop = ca.issue_device_cert("laptop-042", true, 30, now)?;
    println!("device      {}", laptop.certificate.device_id);
    println!("fingerprint {}", laptop.certificate.fingerprint);
    println!("valid       {} .. {}", laptop.certificate.not_before, laptop.certificate.not_after);

    let chain = [laptop.material.der.clone()];
    let peer = "192.0.2.10".parse()?;
    for (label, at) in [("today", now), ("in 31 days", now + Duration::days(31))] {
        match validate_client_cert(&chain, ca.root_der(), at, peer) {
            Ok(info) => println!("{label:>11}: accepted {}", info.subject_cn),
            Err(e) => println!("{label:>11}: refused {} ({e})", e.reason_code()),
        }
    }

    let mut rogue = CertificateAuthority::init(365, now)?;
    let foreign = rogue.issue_device_cert("laptop-042", true, 30, now)?;
    let err = validate_client_cert(&[foreign.material.der], ca.root_der(), now, peer).unwrap_err();
    println!("foreign CA : refused {}", err.reason_code());
    Ok(())
}
