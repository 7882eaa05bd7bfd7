//! Device certificate authority.
//!
//! A single self-signed Ed25519 root issues device certificates (clientAuth)
//! and the gateway's own server certificate (serverAuth). There are no
//! intermediates. Revocation is tracked as a [`RevocationList`] value whose
//! contents are distributed to gateways inside policy snapshots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, ExtendedKeyUsagePurpose, IsCa,
    Issuer, KeyPair, KeyUsagePurpose, SanType, SerialNumber, PKCS_ED25519,
};
use rustls::pki_types::CertificateDer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::util::{is_fingerprint, write_atomic, write_private};

pub const ROOT_COMMON_NAME: &str = "ZTA Device Root CA";
pub const DEFAULT_DEVICE_CERT_DAYS: u32 = 30;

const OU_MANAGED: &str = "managed";
const OU_UNMANAGED: &str = "unmanaged";

#[derive(Debug, Error)]
pub enum PkiError {
    #[error("validity_days must be at least 1")]
    InvalidValidity,
    #[error("device id must not be empty")]
    EmptyDeviceId,
    #[error("malformed fingerprint {0:?}: expected 64 lowercase hex characters")]
    MalformedFingerprint(String),
    #[error("cannot fingerprint empty input")]
    EmptyInput,
    #[error("CA certificate is not valid at {0}")]
    CaNotValid(DateTime<Utc>),
    #[error("serial {0} already issued")]
    DuplicateSerial(u64),
    #[error("certificate generation failed: {0}")]
    Generate(#[from] rcgen::Error),
    #[error("certificate parse failed: {0}")]
    Parse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PkiError + '_ {
    move |source| PkiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// SHA-256 over the given DER bytes, lowercase hex.
pub fn fingerprint_of(der: &[u8]) -> Result<String, PkiError> {
    if der.is_empty() {
        return Err(PkiError::EmptyInput);
    }
    Ok(hex::encode(Sha256::digest(der)))
}

pub fn validate_fingerprint(fp: &str) -> Result<(), PkiError> {
    if is_fingerprint(fp) {
        Ok(())
    } else {
        Err(PkiError::MalformedFingerprint(fp.to_string()))
    }
}

/// Identity record derived from an issued (or presented) device certificate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCertificate {
    pub fingerprint: String,
    pub subject_cn: String,
    pub device_id: String,
    pub managed: bool,
    pub not_before: DateTime<Utc>,
    pub not_after: DateTime<Utc>,
    pub serial: u64,
}

impl DeviceCertificate {
    /// Parses the identity fields back out of a DER certificate.
    pub fn from_der(der: &[u8]) -> Result<Self, PkiError> {
        let (_, cert) = x509_parser::parse_x509_certificate(der)
            .map_err(|e| PkiError::Parse(e.to_string()))?;
        let subject = cert.subject();
        let subject_cn = subject
            .iter_common_name()
            .next()
            .and_then(|cn| cn.as_str().ok())
            .ok_or_else(|| PkiError::Parse("certificate has no common name".into()))?
            .to_string();
        let managed = subject
            .iter_organizational_unit()
            .filter_map(|ou| ou.as_str().ok())
            .any(|ou| ou == OU_MANAGED);
        let validity = cert.validity();
        let not_before = DateTime::from_timestamp(validity.not_before.timestamp(), 0)
            .ok_or_else(|| PkiError::Parse("not_before out of range".into()))?;
        let not_after = DateTime::from_timestamp(validity.not_after.timestamp(), 0)
            .ok_or_else(|| PkiError::Parse("not_after out of range".into()))?;
        let raw = cert.tbs_certificate.raw_serial();
        let raw = &raw[raw.iter().take_while(|b| **b == 0).count()..];
        if raw.len() > 8 {
            return Err(PkiError::Parse("serial wider than 64 bits".into()));
        }
        let serial = raw.iter().fold(0u64, |acc, b| (acc << 8) | u64::from(*b));
        Ok(Self {
            fingerprint: fingerprint_of(der)?,
            device_id: subject_cn.clone(),
            subject_cn,
            managed,
            not_before,
            not_after,
            serial,
        })
    }
}

/// A freshly issued certificate together with its private key.
#[derive(Debug, Clone)]
pub struct IssuedCert {
    pub der: CertificateDer<'static>,
    pub cert_pem: String,
    pub key_pem: String,
}

impl IssuedCert {
    /// Writes `<stem>.cert.pem` and `<stem>.key.pem` (0600) into `dir`.
    pub fn write_to(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), PkiError> {
        let cert_path = dir.join(format!("{stem}.cert.pem"));
        let key_path = dir.join(format!("{stem}.key.pem"));
        fs::write(&cert_path, &self.cert_pem).map_err(io_err(&cert_path))?;
        write_private(&key_path, self.key_pem.as_bytes()).map_err(io_err(&key_path))?;
        Ok((cert_path, key_path))
    }
}

#[derive(Debug, Clone)]
pub struct IssuedDevice {
    pub certificate: DeviceCertificate,
    pub material: IssuedCert,
}

impl IssuedDevice {
    /// Writes `<device_id>.cert.pem` and `<device_id>.key.pem` (0600) into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(PathBuf, PathBuf), PkiError> {
        self.material.write_to(dir, &self.certificate.device_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CaState {
    next_serial: u64,
    last_serial: u64,
}

/// Root of trust for device identity.
///
/// Issuance takes `&mut self`, so a single owner serializes it.
pub struct CertificateAuthority {
    key: KeyPair,
    root_der: CertificateDer<'static>,
    root_pem: String,
    not_before: DateTime<Utc>,
    not_after: DateTime<Utc>,
    next_serial: u64,
    last_serial: u64,
}

impl std::fmt::Debug for CertificateAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CertificateAuthority")
            .field("not_before", &self.not_before)
            .field("not_after", &self.not_after)
            .field("next_serial", &self.next_serial)
            .finish_non_exhaustive()
    }
}

fn to_offset(t: DateTime<Utc>) -> time::OffsetDateTime {
    time::OffsetDateTime::from_unix_timestamp(t.timestamp()).expect("timestamp in range")
}

fn whole_seconds(t: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp(t.timestamp(), 0).expect("timestamp in range")
}

fn serial_number(serial: u64) -> SerialNumber {
    let bytes = serial.to_be_bytes();
    let skip = bytes.iter().take_while(|b| **b == 0).count().min(7);
    // A leading high bit would read back as a negative INTEGER.
    let mut out = Vec::with_capacity(9);
    if bytes[skip] & 0x80 != 0 {
        out.push(0);
    }
    out.extend_from_slice(&bytes[skip..]);
    SerialNumber::from_slice(&out)
}

impl CertificateAuthority {
    /// Creates a fresh self-signed root valid for exactly `validity_days`.
    pub fn init(validity_days: u32, now: DateTime<Utc>) -> Result<Self, PkiError> {
        if validity_days == 0 {
            return Err(PkiError::InvalidValidity);
        }
        let key = KeyPair::generate_for(&PKCS_ED25519)?;
        let not_before = whole_seconds(now);
        let not_after = not_before + Duration::days(i64::from(validity_days));

        let mut params = CertificateParams::default();
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, ROOT_COMMON_NAME);
        dn.push(DnType::OrganizationName, "ZTA");
        params.distinguished_name = dn;
        params.is_ca = IsCa::Ca(BasicConstraints::Constrained(0));
        params.key_usages = vec![
            KeyUsagePurpose::KeyCertSign,
            KeyUsagePurpose::CrlSign,
            KeyUsagePurpose::DigitalSignature,
        ];
        params.not_before = to_offset(not_before);
        params.not_after = to_offset(not_after);
        params.serial_number = Some(serial_number(1));
        let cert = params.self_signed(&key)?;

        Ok(Self {
            root_pem: cert.pem(),
            root_der: cert.der().clone(),
            key,
            not_before,
            not_after,
            next_serial: 2,
            last_serial: 1,
        })
    }

    pub fn root_der(&self) -> &CertificateDer<'static> {
        &self.root_der
    }

    pub fn root_pem(&self) -> &str {
        &self.root_pem
    }

    pub fn not_before(&self) -> DateTime<Utc> {
        self.not_before
    }

    pub fn not_after(&self) -> DateTime<Utc> {
        self.not_after
    }

    pub fn next_serial(&self) -> u64 {
        self.next_serial
    }

    /// Issues a clientAuth certificate whose subject CN is the device id.
    ///
    /// The leaf never outlives the root: `not_after` is clamped to the CA's.
    pub fn issue_device_cert(
        &mut self,
        device_id: &str,
        managed: bool,
        validity_days: u32,
        now: DateTime<Utc>,
    ) -> Result<IssuedDevice, PkiError> {
        if device_id.is_empty() {
            return Err(PkiError::EmptyDeviceId);
        }
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, device_id);
        dn.push(
            DnType::OrganizationalUnitName,
            if managed { OU_MANAGED } else { OU_UNMANAGED },
        );
        let material = self.issue(
            dn,
            Vec::new(),
            ExtendedKeyUsagePurpose::ClientAuth,
            validity_days,
            now,
        )?;
        let certificate = DeviceCertificate::from_der(&material.der)?;
        Ok(IssuedDevice {
            certificate,
            material,
        })
    }

    /// Issues a serverAuth certificate for the gateway listener.
    pub fn issue_server_cert(
        &mut self,
        dns_names: &[&str],
        validity_days: u32,
        now: DateTime<Utc>,
    ) -> Result<IssuedCert, PkiError> {
        let mut dn = DistinguishedName::new();
        dn.push(
            DnType::CommonName,
            dns_names.first().copied().unwrap_or("zta-gateway"),
        );
        let mut sans = Vec::new();
        for name in dns_names {
            sans.push(SanType::DnsName((*name).try_into()?));
        }
        sans.push(SanType::IpAddress([127, 0, 0, 1].into()));
        self.issue(
            dn,
            sans,
            ExtendedKeyUsagePurpose::ServerAuth,
            validity_days,
            now,
        )
    }

    fn issue(
        &mut self,
        dn: DistinguishedName,
        sans: Vec<SanType>,
        usage: ExtendedKeyUsagePurpose,
        validity_days: u32,
        now: DateTime<Utc>,
    ) -> Result<IssuedCert, PkiError> {
        if validity_days == 0 {
            return Err(PkiError::InvalidValidity);
        }
        if now < self.not_before || now > self.not_after {
            return Err(PkiError::CaNotValid(now));
        }
        let serial = self.next_serial;
        if serial <= self.last_serial {
            return Err(PkiError::DuplicateSerial(serial));
        }

        let not_before = whole_seconds(now);
        let not_after =
            (not_before + Duration::days(i64::from(validity_days))).min(self.not_after);

        let mut params = CertificateParams::default();
        params.distinguished_name = dn;
        params.subject_alt_names = sans;
        params.is_ca = IsCa::ExplicitNoCa;
        params.key_usages = vec![KeyUsagePurpose::DigitalSignature];
        params.extended_key_usages = vec![usage];
        params.not_before = to_offset(not_before);
        params.not_after = to_offset(not_after);
        params.serial_number = Some(serial_number(serial));
        params.use_authority_key_identifier_extension = true;

        let leaf_key = KeyPair::generate_for(&PKCS_ED25519)?;
        let issuer = Issuer::from_ca_cert_der(&self.root_der, &self.key)?;
        let cert = params.signed_by(&leaf_key, &issuer)?;

        self.last_serial = serial;
        self.next_serial = serial + 1;
        Ok(IssuedCert {
            der: cert.der().clone(),
            cert_pem: cert.pem(),
            key_pem: leaf_key.serialize_pem(),
        })
    }

    /// Persists the CA as `ca.key.pem` (0600), `ca.cert.pem` and `ca.state.json`.
    pub fn save(&self, dir: &Path) -> Result<(), PkiError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let key_path = dir.join("ca.key.pem");
        write_private(&key_path, self.key.serialize_pem().as_bytes())
            .map_err(io_err(&key_path))?;
        let cert_path = dir.join("ca.cert.pem");
        fs::write(&cert_path, &self.root_pem).map_err(io_err(&cert_path))?;
        let state_path = dir.join("ca.state.json");
        let state = CaState {
            next_serial: self.next_serial,
            last_serial: self.last_serial,
        };
        write_atomic(
            &state_path,
            &serde_json::to_vec_pretty(&state).expect("state serializes"),
        )
        .map_err(io_err(&state_path))
    }

    pub fn load(dir: &Path) -> Result<Self, PkiError> {
        let key_path = dir.join("ca.key.pem");
        let key_pem = fs::read_to_string(&key_path).map_err(io_err(&key_path))?;
        let key = KeyPair::from_pem(&key_pem)?;
        let cert_path = dir.join("ca.cert.pem");
        let root_pem = fs::read_to_string(&cert_path).map_err(io_err(&cert_path))?;
        let root_der = crate::tls_gate::load_certs_pem(&root_pem)
            .map_err(|e| PkiError::Parse(e.to_string()))?
            .into_iter()
            .next()
            .ok_or_else(|| PkiError::Parse("no certificate in ca.cert.pem".into()))?;
        let state_path = dir.join("ca.state.json");
        let state: CaState = serde_json::from_slice(
            &fs::read(&state_path).map_err(io_err(&state_path))?,
        )
        .map_err(|e| PkiError::Parse(e.to_string()))?;
        let (_, parsed) = x509_parser::parse_x509_certificate(&root_der)
            .map_err(|e| PkiError::Parse(e.to_string()))?;
        let validity = parsed.validity();
        Ok(Self {
            not_before: DateTime::from_timestamp(validity.not_before.timestamp(), 0)
                .expect("timestamp in range"),
            not_after: DateTime::from_timestamp(validity.not_after.timestamp(), 0)
                .expect("timestamp in range"),
            key,
            root_der,
            root_pem,
            next_serial: state.next_serial,
            last_serial: state.last_serial,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationEntry {
    pub fingerprint: String,
    pub revoked_at: DateTime<Utc>,
    pub reason: String,
}

/// Revoked device fingerprints. Mutation returns a new value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<RevocationEntry>", into = "Vec<RevocationEntry>")]
pub struct RevocationList {
    entries: BTreeMap<String, RevocationEntry>,
}

impl From<Vec<RevocationEntry>> for RevocationList {
    fn from(entries: Vec<RevocationEntry>) -> Self {
        let mut map = BTreeMap::new();
        for e in entries {
            map.entry(e.fingerprint.clone()).or_insert(e);
        }
        Self { entries: map }
    }
}

impl From<RevocationList> for Vec<RevocationEntry> {
    fn from(list: RevocationList) -> Self {
        list.entries.into_values().collect()
    }
}

impl RevocationList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns a list containing `fingerprint`. Revoking an already revoked
    /// fingerprint keeps the original entry.
    pub fn revoke(
        &self,
        fingerprint: &str,
        reason: &str,
        at: DateTime<Utc>,
    ) -> Result<RevocationList, PkiError> {
        validate_fingerprint(fingerprint)?;
        let mut next = self.clone();
        next.entries
            .entry(fingerprint.to_string())
            .or_insert_with(|| RevocationEntry {
                fingerprint: fingerprint.to_string(),
                revoked_at: at,
                reason: reason.to_string(),
            });
        Ok(next)
    }

    pub fn contains(&self, fingerprint: &str) -> bool {
        self.entries.contains_key(fingerprint)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fingerprint: &str) -> Option<&RevocationEntry> {
        self.entries.get(fingerprint)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RevocationEntry> {
        self.entries.values()
    }

    pub fn fingerprints(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> DateTime<Utc> {
        DateTime::from_timestamp(1_760_000_000, 0).unwrap()
    }

    #[test]
    fn ca_validity_is_exact() {
        let ca = CertificateAuthority::init(365, t0()).unwrap();
        assert_eq!(ca.not_after() - ca.not_before(), Duration::days(365));
        let parsed = DeviceCertificate::from_der(ca.root_der()).unwrap();
        assert_eq!(parsed.not_after - parsed.not_before, Duration::days(365));
        assert_eq!(parsed.subject_cn, ROOT_COMMON_NAME);
    }

    #[test]
    fn zero_day_ca_is_rejected() {
        assert!(matches!(
            CertificateAuthority::init(0, t0()),
            Err(PkiError::InvalidValidity)
        ));
    }

    #[test]
    fn one_day_ca_issues_cert_expiring_within_a_day() {
        let mut ca = CertificateAuthority::init(1, t0()).unwrap();
        let dev = ca
            .issue_device_cert("laptop-001", true, 30, t0() + Duration::hours(1))
            .unwrap();
        assert!(dev.certificate.not_after <= t0() + Duration::hours(24));
        assert!(dev.certificate.not_before < dev.certificate.not_after);
    }

    #[test]
    fn device_cert_fields() {
        let mut ca = CertificateAuthority::init(365, t0()).unwrap();
        let dev = ca.issue_device_cert("laptop-001", true, 30, t0()).unwrap();
        let c = &dev.certificate;
        assert_eq!(c.subject_cn, "laptop-001");
        assert_eq!(c.device_id, c.subject_cn);
        assert!(c.managed);
        assert_eq!(c.not_after - c.not_before, Duration::days(30));
        assert!(is_fingerprint(&c.fingerprint));
        assert_eq!(c.fingerprint, fingerprint_of(&dev.material.der).unwrap());

        let unmanaged = ca.issue_device_cert("byod-7", false, 30, t0()).unwrap();
        assert!(!unmanaged.certificate.managed);
    }

    #[test]
    fn successive_issuances_are_distinct() {
        let mut ca = CertificateAuthority::init(365, t0()).unwrap();
        let a = ca.issue_device_cert("laptop-001", true, 30, t0()).unwrap();
        let b = ca.issue_device_cert("laptop-001", true, 30, t0()).unwrap();
        assert!(b.certificate.serial > a.certificate.serial);
        assert_ne!(a.certificate.fingerprint, b.certificate.fingerprint);
    }

    #[test]
    fn large_serials_round_trip() {
        let mut ca = CertificateAuthority::init(365, t0()).unwrap();
        ca.next_serial = 0x80;
        let dev = ca.issue_device_cert("d", true, 1, t0()).unwrap();
        assert_eq!(dev.certificate.serial, 0x80);
        ca.next_serial = u64::MAX - 1;
        let dev = ca.issue_device_cert("d", true, 1, t0()).unwrap();
        assert_eq!(dev.certificate.serial, u64::MAX - 1);
    }

    #[test]
    fn empty_device_id_is_rejected() {
        let mut ca = CertificateAuthority::init(365, t0()).unwrap();
        assert!(matches!(
            ca.issue_device_cert("", true, 30, t0()),
            Err(PkiError::EmptyDeviceId)
        ));
        assert!(matches!(
            ca.issue_device_cert("x", true, 0, t0()),
            Err(PkiError::InvalidValidity)
        ));
    }

    #[test]
    fn duplicate_serial_is_fatal() {
        let mut ca = CertificateAuthority::init(365, t0()).unwrap();
        ca.issue_device_cert("a", true, 30, t0()).unwrap();
        ca.next_serial = ca.last_serial;
        assert!(matches!(
            ca.issue_device_cert("b", true, 30, t0()),
            Err(PkiError::DuplicateSerial(_))
        ));
    }

    #[test]
    fn expired_ca_refuses_to_issue() {
        let mut ca = CertificateAuthority::init(1, t0()).unwrap();
        assert!(matches!(
            ca.issue_device_cert("a", true, 30, t0() + Duration::days(2)),
            Err(PkiError::CaNotValid(_))
        ));
    }

    #[test]
    fn save_and_load_keeps_issuing() {
        let dir = tempfile::tempdir().unwrap();
        let mut ca = CertificateAuthority::init(30, t0()).unwrap();
        let first = ca.issue_device_cert("a", true, 5, t0()).unwrap();
        ca.save(dir.path()).unwrap();

        let mut loaded = CertificateAuthority::load(dir.path()).unwrap();
        assert_eq!(loaded.root_der(), ca.root_der());
        let second = loaded.issue_device_cert("b", true, 5, t0()).unwrap();
        assert!(second.certificate.serial > first.certificate.serial);

        let mode = std::os::unix::fs::PermissionsExt::mode(
            &fs::metadata(dir.path().join("ca.key.pem"))
                .unwrap()
                .permissions(),
        );
        assert_eq!(mode & 0o777, 0o600);
    }

    #[test]
    fn fingerprint_of_abc() {
        assert_eq!(
            fingerprint_of(b"abc").unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(matches!(fingerprint_of(b""), Err(PkiError::EmptyInput)));
    }

    #[test]
    fn fingerprint_distinguishes_trailing_zero() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..100u32 {
            let x = format!("device-corpus-item-{i}").into_bytes();
            let mut y = x.clone();
            y.push(0);
            let fx = fingerprint_of(&x).unwrap();
            assert_eq!(fx, fingerprint_of(&x).unwrap());
            assert_ne!(fx, fingerprint_of(&y).unwrap());
            assert!(seen.insert(fx));
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn revoke_is_idempotent_union() {
        let f1 = "a".repeat(64);
        let f2 = "b".repeat(64);
        let empty = RevocationList::new();
        let one = empty.revoke(&f1, "lost device", t0()).unwrap();
        assert!(empty.is_empty());
        assert_eq!(one.len(), 1);
        let again = one.revoke(&f1, "x", t0() + Duration::hours(1)).unwrap();
        assert_eq!(again, one);
        assert_eq!(again.get(&f1).unwrap().reason, "lost device");
        let two = one.revoke(&f2, "y", t0()).unwrap();
        assert_eq!(two.fingerprints().collect::<Vec<_>>(), vec![&f1[..], &f2[..]]);
    }

    #[test]
    fn revoke_rejects_malformed_fingerprint() {
        let rl = RevocationList::new();
        for bad in ["", &"a".repeat(63), &"A".repeat(64), &"g".repeat(64)] {
            assert!(matches!(
                rl.revoke(bad, "r", t0()),
                Err(PkiError::MalformedFingerprint(_))
            ));
        }
    }

    #[test]
    fn revocation_list_serde_dedups() {
        let f1 = "c".repeat(64);
        let rl = RevocationList::new().revoke(&f1, "r", t0()).unwrap();
        let json = serde_json::to_string(&rl).unwrap();
        let doubled = format!("[{0},{0}]", &json[1..json.len() - 1]);
        let back: RevocationList = serde_json::from_str(&doubled).unwrap();
        assert_eq!(back, rl);
    }
}
