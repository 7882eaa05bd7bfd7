//! mTLS termination and device certificate validation.
//!
//! Every inbound connection must present a device certificate that chains to
//! the fleet root, is inside its validity window and carries the clientAuth
//! extended key usage. Revocation is deliberately not checked here; it is a
//! policy-layer decision so it can propagate through snapshots.

use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rustls::client::danger::HandshakeSignatureValid;
use rustls::crypto::{verify_tls12_signature, verify_tls13_signature, CryptoProvider};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, UnixTime};
use rustls::server::danger::{ClientCertVerified, ClientCertVerifier};
use rustls::{CertificateError, DigitallySignedStruct, DistinguishedName, SignatureScheme};
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio_rustls::server::TlsStream;
use tokio_rustls::TlsAcceptor;

use crate::clock::SharedClock;
use crate::pki::fingerprint_of;

/// DER OID body of id-kp-clientAuth (1.3.6.1.5.5.7.3.2).
const EKU_CLIENT_AUTH: &[u8] = &[0x2b, 0x06, 0x01, 0x05, 0x05, 0x07, 0x03, 0x02];

/// Identity of the device on the other end of an established connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TlsClientInfo {
    pub fingerprint: String,
    pub subject_cn: String,
    pub validated_at: DateTime<Utc>,
    pub peer_ip: IpAddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CertValidationError {
    #[error("no client certificate presented")]
    EmptyChain,
    #[error("certificate is not issued by the trusted root")]
    UntrustedIssuer,
    #[error("certificate has expired")]
    ExpiredCert,
    #[error("certificate is not yet valid")]
    NotYetValid,
    #[error("certificate lacks clientAuth usage")]
    WrongKeyUsage,
    #[error("malformed certificate: {0}")]
    Malformed(String),
}

impl CertValidationError {
    pub fn reason_code(&self) -> &'static str {
        match self {
            Self::EmptyChain => "handshake_no_client_cert",
            Self::UntrustedIssuer => "untrusted_issuer",
            Self::ExpiredCert => "expired_cert",
            Self::NotYetValid => "not_yet_valid",
            Self::WrongKeyUsage => "wrong_key_usage",
            Self::Malformed(_) => "malformed_cert",
        }
    }

    fn to_rustls(&self) -> rustls::Error {
        let err = match self {
            Self::EmptyChain => return rustls::Error::NoCertificatesPresented,
            Self::UntrustedIssuer => CertificateError::UnknownIssuer,
            Self::ExpiredCert => CertificateError::Expired,
            Self::NotYetValid => CertificateError::NotValidYet,
            Self::WrongKeyUsage => CertificateError::InvalidPurpose,
            Self::Malformed(_) => CertificateError::BadEncoding,
        };
        rustls::Error::InvalidCertificate(err)
    }

    fn from_rustls(err: &rustls::Error) -> Option<Self> {
        Some(match err {
            rustls::Error::NoCertificatesPresented => Self::EmptyChain,
            rustls::Error::InvalidCertificate(c) => match c {
                CertificateError::UnknownIssuer | CertificateError::BadSignature => {
                    Self::UntrustedIssuer
                }
                CertificateError::Expired | CertificateError::ExpiredContext { .. } => {
                    Self::ExpiredCert
                }
                CertificateError::NotValidYet | CertificateError::NotValidYetContext { .. } => {
                    Self::NotYetValid
                }
                CertificateError::InvalidPurpose | CertificateError::InvalidPurposeContext { .. } => {
                    Self::WrongKeyUsage
                }
                other => Self::Malformed(format!("{other:?}")),
            },
            _ => return None,
        })
    }
}

/// Validates a presented chain (leaf first) against `trust_root` at `at`.
///
/// Pure: the result depends only on the arguments.
pub fn validate_client_cert(
    presented_chain: &[CertificateDer<'_>],
    trust_root: &CertificateDer<'_>,
    at: DateTime<Utc>,
    peer_ip: IpAddr,
) -> Result<TlsClientInfo, CertValidationError> {
    let (leaf, intermediates) = presented_chain
        .split_first()
        .ok_or(CertValidationError::EmptyChain)?;
    let anchor = webpki::anchor_from_trusted_cert(trust_root)
        .map_err(|e| CertValidationError::Malformed(format!("trust root: {e}")))?;
    let ee = webpki::EndEntityCert::try_from(leaf)
        .map_err(|e| CertValidationError::Malformed(e.to_string()))?;
    let secs = u64::try_from(at.timestamp()).unwrap_or(0);
    let time = UnixTime::since_unix_epoch(std::time::Duration::from_secs(secs));
    ee.verify_for_usage(
        webpki::ALL_VERIFICATION_ALGS,
        &[anchor],
        intermediates,
        time,
        webpki::KeyUsage::required(EKU_CLIENT_AUTH),
        None,
        None,
    )
    .map_err(|e| match e {
        webpki::Error::UnknownIssuer
        | webpki::Error::InvalidSignatureForPublicKey
        | webpki::Error::CaUsedAsEndEntity => CertValidationError::UntrustedIssuer,
        webpki::Error::CertExpired { .. } => CertValidationError::ExpiredCert,
        webpki::Error::CertNotValidYet { .. } => CertValidationError::NotYetValid,
        webpki::Error::RequiredEkuNotFoundContext(_) => CertValidationError::WrongKeyUsage,
        #[allow(deprecated)]
        webpki::Error::RequiredEkuNotFound => CertValidationError::WrongKeyUsage,
        other => CertValidationError::Malformed(other.to_string()),
    })?;

    let (_, parsed) = x509_parser::parse_x509_certificate(leaf)
        .map_err(|e| CertValidationError::Malformed(e.to_string()))?;
    let subject_cn = parsed
        .subject()
        .iter_common_name()
        .next()
        .and_then(|cn| cn.as_str().ok())
        .unwrap_or_default()
        .to_string();
    Ok(TlsClientInfo {
        fingerprint: fingerprint_of(leaf).map_err(|e| CertValidationError::Malformed(e.to_string()))?,
        subject_cn,
        validated_at: at,
        peer_ip,
    })
}

/// Handshake outcome counters, readable for local evidence of refusals.
#[derive(Debug, Default)]
pub struct TlsGateMetrics {
    pub accepted: AtomicU64,
    pub no_client_cert: AtomicU64,
    pub bad_cert: AtomicU64,
    pub expired_cert: AtomicU64,
    pub not_yet_valid: AtomicU64,
    pub untrusted_issuer: AtomicU64,
    pub wrong_key_usage: AtomicU64,
    pub other_failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TlsGateCounts {
    pub accepted: u64,
    pub no_client_cert: u64,
    pub bad_cert: u64,
    pub expired_cert: u64,
    pub not_yet_valid: u64,
    pub untrusted_issuer: u64,
    pub wrong_key_usage: u64,
    pub other_failures: u64,
}

impl TlsGateMetrics {
    pub fn snapshot(&self) -> TlsGateCounts {
        let r = |c: &AtomicU64| c.load(Ordering::Relaxed);
        TlsGateCounts {
            accepted: r(&self.accepted),
            no_client_cert: r(&self.no_client_cert),
            bad_cert: r(&self.bad_cert),
            expired_cert: r(&self.expired_cert),
            not_yet_valid: r(&self.not_yet_valid),
            untrusted_issuer: r(&self.untrusted_issuer),
            wrong_key_usage: r(&self.wrong_key_usage),
            other_failures: r(&self.other_failures),
        }
    }

    fn record_failure(&self, err: &HandshakeError) {
        let bump = |c: &AtomicU64| {
            c.fetch_add(1, Ordering::Relaxed);
        };
        match err {
            HandshakeError::NoClientCert => bump(&self.no_client_cert),
            HandshakeError::BadCert(e) => {
                bump(&self.bad_cert);
                match e {
                    CertValidationError::ExpiredCert => bump(&self.expired_cert),
                    CertValidationError::NotYetValid => bump(&self.not_yet_valid),
                    CertValidationError::UntrustedIssuer => bump(&self.untrusted_issuer),
                    CertValidationError::WrongKeyUsage => bump(&self.wrong_key_usage),
                    CertValidationError::EmptyChain | CertValidationError::Malformed(_) => {}
                }
            }
            HandshakeError::Io(_) => bump(&self.other_failures),
        }
    }
}

#[derive(Debug, Error)]
pub enum HandshakeError {
    #[error("client presented no certificate")]
    NoClientCert,
    #[error("client certificate rejected: {0}")]
    BadCert(CertValidationError),
    #[error("tls handshake failed: {0}")]
    Io(std::io::Error),
}

impl HandshakeError {
    pub fn reason_code(&self) -> &'static str {
        match self {
            Self::NoClientCert => "handshake_no_client_cert",
            Self::BadCert(e) => e.reason_code(),
            Self::Io(_) => "handshake_failed",
        }
    }
}

/// rustls hook that applies [`validate_client_cert`] during the handshake.
#[derive(Debug)]
pub struct DeviceCertVerifier {
    root: CertificateDer<'static>,
    hints: Vec<DistinguishedName>,
    clock: SharedClock,
    provider: Arc<CryptoProvider>,
}

impl DeviceCertVerifier {
    pub fn new(root: CertificateDer<'static>, clock: SharedClock) -> Result<Self, TlsConfigError> {
        let anchor = webpki::anchor_from_trusted_cert(&root)
            .map_err(|e| TlsConfigError::Certificate(e.to_string()))?;
        let hints = vec![DistinguishedName::in_sequence(anchor.subject.as_ref())];
        Ok(Self {
            root,
            hints,
            clock,
            provider: Arc::new(rustls::crypto::ring::default_provider()),
        })
    }
}

impl ClientCertVerifier for DeviceCertVerifier {
    fn root_hint_subjects(&self) -> &[DistinguishedName] {
        &self.hints
    }

    fn verify_client_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        intermediates: &[CertificateDer<'_>],
        _now: UnixTime,
    ) -> Result<ClientCertVerified, rustls::Error> {
        let mut chain = Vec::with_capacity(1 + intermediates.len());
        chain.push(end_entity.clone());
        chain.extend(intermediates.iter().cloned());
        validate_client_cert(
            &chain,
            &self.root,
            self.clock.now(),
            IpAddr::from([0, 0, 0, 0]),
        )
        .map(|_| ClientCertVerified::assertion())
        .map_err(|e| e.to_rustls())
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_tls12_signature(
            message,
            cert,
            dss,
            &self.provider.signature_verification_algorithms,
        )
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_tls13_signature(
            message,
            cert,
            dss,
            &self.provider.signature_verification_algorithms,
        )
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.provider
            .signature_verification_algorithms
            .supported_schemes()
    }

    fn client_auth_mandatory(&self) -> bool {
        true
    }
}

#[derive(Debug, Error)]
pub enum TlsConfigError {
    #[error("bad certificate material: {0}")]
    Certificate(String),
    #[error("bad private key: {0}")]
    Key(String),
    #[error(transparent)]
    Rustls(#[from] rustls::Error),
}

pub fn load_certs_pem(pem: &str) -> Result<Vec<CertificateDer<'static>>, TlsConfigError> {
    let certs = CertificateDer::pem_slice_iter(pem.as_bytes())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TlsConfigError::Certificate(e.to_string()))?;
    if certs.is_empty() {
        return Err(TlsConfigError::Certificate("no certificates found".into()));
    }
    Ok(certs)
}

pub fn load_key_pem(pem: &str) -> Result<PrivateKeyDer<'static>, TlsConfigError> {
    PrivateKeyDer::from_pem_slice(pem.as_bytes()).map_err(|e| TlsConfigError::Key(e.to_string()))
}

/// Server config that requires a device certificate on every handshake.
/// TLS 1.2 is the floor.
pub fn server_config(
    server_chain: Vec<CertificateDer<'static>>,
    server_key: PrivateKeyDer<'static>,
    verifier: Arc<DeviceCertVerifier>,
) -> Result<rustls::ServerConfig, TlsConfigError> {
    let provider = Arc::new(rustls::crypto::ring::default_provider());
    let mut config = rustls::ServerConfig::builder_with_provider(provider)
        .with_protocol_versions(&[&rustls::version::TLS13, &rustls::version::TLS12])?
        .with_client_cert_verifier(verifier)
        .with_single_cert(server_chain, server_key)?;
    config.alpn_protocols = vec![b"http/1.1".to_vec()];
    Ok(config)
}

/// Client config for programmatic device clients. `identity` is the device
/// chain and key; `None` connects without a certificate.
pub fn client_config(
    trust_root: &CertificateDer<'static>,
    identity: Option<(Vec<CertificateDer<'static>>, PrivateKeyDer<'static>)>,
) -> Result<rustls::ClientConfig, TlsConfigError> {
    let mut roots = rustls::RootCertStore::empty();
    roots.add(trust_root.clone())?;
    let provider = Arc::new(rustls::crypto::ring::default_provider());
    let builder = rustls::ClientConfig::builder_with_provider(provider)
        .with_protocol_versions(&[&rustls::version::TLS13, &rustls::version::TLS12])?
        .with_root_certificates(roots);
    let mut config = match identity {
        Some((chain, key)) => builder.with_client_auth_cert(chain, key)?,
        None => builder.with_no_client_auth(),
    };
    config.alpn_protocols = vec![b"http/1.1".to_vec()];
    Ok(config)
}

/// Completes the TLS handshake on an accepted socket and derives the device
/// identity. Failures are counted in `metrics` and classified for logging.
pub async fn accept_connection(
    acceptor: &TlsAcceptor,
    stream: TcpStream,
    peer: SocketAddr,
    trust_root: &CertificateDer<'static>,
    clock: &SharedClock,
    metrics: &TlsGateMetrics,
) -> Result<(TlsStream<TcpStream>, TlsClientInfo), HandshakeError> {
    let result = async {
        let tls = acceptor.accept(stream).await.map_err(|e| {
            let classified = e
                .get_ref()
                .and_then(|inner| inner.downcast_ref::<rustls::Error>())
                .and_then(CertValidationError::from_rustls);
            match classified {
                Some(CertValidationError::EmptyChain) => HandshakeError::NoClientCert,
                Some(other) => HandshakeError::BadCert(other),
                None => HandshakeError::Io(e),
            }
        })?;
        let chain = tls
            .get_ref()
            .1
            .peer_certificates()
            .map(<[_]>::to_vec)
            .unwrap_or_default();
        let info = validate_client_cert(&chain, trust_root, clock.now(), peer.ip()).map_err(
            |e| match e {
                CertValidationError::EmptyChain => HandshakeError::NoClientCert,
                other => HandshakeError::BadCert(other),
            },
        )?;
        Ok((tls, info))
    }
    .await;
    match &result {
        Ok(_) => {
            metrics.accepted.fetch_add(1, Ordering::Relaxed);
        }
        Err(e) => metrics.record_failure(e),
    }
    result
}
