use chrono::{DateTime, Duration, Utc};
use ed25519_dalek::{Signature, Verifier, VerifyingKey};
use rustls::pki_types::CertificateDer;
use sha2::{Digest, Sha256};
use x509_parser::prelude::*;
use zta::pki::{fingerprint_of, CertificateAuthority};
use zta::tls_gate::{validate_client_cert, CertValidationError};

fn t0() -> DateTime<Utc> {
    DateTime::from_timestamp(1_760_000_000, 0).unwrap()
}

fn ed25519_key(cert: &X509Certificate<'_>) -> VerifyingKey {
    let raw: [u8; 32] = cert.public_key().subject_public_key.data.as_ref().try_into().unwrap();
    VerifyingKey::from_bytes(&raw).unwrap()
}

/// Validity decided from the parsed dates alone.
fn oracle(cert: &X509Certificate<'_>, at: DateTime<Utc>) -> Result<(), &'static str> {
    let t = at.timestamp();
    if t < cert.validity().not_before.timestamp() {
        Err("not_yet_valid")
    } else if t > cert.validity().not_after.timestamp() {
        Err("expired_cert")
    } else {
        Ok(())
    }
}

#[test]
fn device_certs_parse_and_verify_independently() {
    let mut ca = CertificateAuthority::init(3650, t0()).unwrap();
    let root_der = ca.root_der().clone();
    let (_, root) = parse_x509_certificate(&root_der).unwrap();
    let root_key = ed25519_key(&root);
    assert!(root.is_ca());

    for i in 0..20 {
        let id = format!("laptop-{i:03}");
        let dev = ca.issue_device_cert(&id, i % 3 != 0, 30 + i, t0()).unwrap();
        let (_, cert) = parse_x509_certificate(&dev.material.der).unwrap();

        let cn = cert.subject().iter_common_name().next().unwrap().as_str().unwrap();
        assert_eq!(cn, id);
        assert_eq!(cert.issuer(), root.subject());
        let eku = cert.extended_key_usage().unwrap().expect("EKU present").value;
        assert!(eku.client_auth && !eku.server_auth);
        assert!(!cert.is_ca());

        let sig = Signature::from_slice(&cert.signature_value.data).unwrap();
        root_key.verify(cert.tbs_certificate.as_ref(), &sig).unwrap();

        let fp = hex::encode(Sha256::digest(dev.material.der.as_ref()));
        assert_eq!(dev.certificate.fingerprint, fp);
        assert_eq!(fingerprint_of(&dev.material.der).unwrap(), fp);
        assert_eq!(
            cert.validity().not_after.timestamp() - cert.validity().not_before.timestamp(),
            i64::from(30 + i) * 86_400
        );
    }
}

#[test]
fn validation_agrees_with_date_oracle_and_is_pure() {
    let mut ca = CertificateAuthority::init(3650, t0() - Duration::days(400)).unwrap();
    let root = ca.root_der().clone();
    let ip = "127.0.0.1".parse().unwrap();
    let clocks = [t0() - Duration::days(200), t0(), t0() + Duration::days(200)];
    for i in 0..50u32 {
        let issued_at = t0() - Duration::days(i64::from(i) * 7);
        let days = 1 + (i * 37) % 365;
        let dev = ca.issue_device_cert(&format!("d{i}"), true, days, issued_at).unwrap();
        let (_, parsed) = parse_x509_certificate(&dev.material.der).unwrap();
        let chain = [dev.material.der.clone()];
        for at in clocks {
            let first = validate_client_cert(&chain, &root, at, ip);
            let second = validate_client_cert(&chain, &root, at, ip);
            assert_eq!(first.is_ok(), second.is_ok());
            let got = first.as_ref().map(|_| ()).map_err(CertValidationError::reason_code);
            assert_eq!(got, oracle(&parsed, at), "cert {i} at {at}");
            if let Ok(info) = first {
                assert_eq!(info.fingerprint, dev.certificate.fingerprint);
                assert_eq!(info.subject_cn, format!("d{i}"));
            }
        }
    }
}

#[test]
fn foreign_issuer_server_usage_and_empty_chain_are_refused() {
    let mut ca = CertificateAuthority::init(365, t0()).unwrap();
    let mut other = CertificateAuthority::init(365, t0()).unwrap();
    let ip = "127.0.0.1".parse().unwrap();
    let at = t0() + Duration::days(1);

    let foreign = other.issue_device_cert("laptop-x", true, 30, t0()).unwrap();
    assert_eq!(
        validate_client_cert(&[foreign.material.der], ca.root_der(), at, ip).unwrap_err(),
        CertValidationError::UntrustedIssuer
    );
    let server = ca.issue_server_cert(&["gateway.corp.test"], 30, t0()).unwrap();
    assert_eq!(
        validate_client_cert(&[server.der], ca.root_der(), at, ip).unwrap_err(),
        CertValidationError::WrongKeyUsage
    );
    let empty: [CertificateDer<'static>; 0] = [];
    assert_eq!(
        validate_client_cert(&empty, ca.root_der(), at, ip).unwrap_err().reason_code(),
        "handshake_no_client_cert"
    );
}
