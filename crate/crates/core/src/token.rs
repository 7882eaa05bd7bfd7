//! Proxy-signed identity tokens.
//!
//! The gateway forwards exactly one credential downstream: a compact
//! `header.payload.signature` token (base64url segments, Ed25519 / `EdDSA`)
//! in the `X-ZTA-Identity` header. Applications verify it against the key set
//! published at `/.zta/keys` and never see the SSO cookie or IdP artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Utc};
use ed25519_dalek::pkcs8::{DecodePrivateKey, EncodePrivateKey};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::authn::{EmploymentType, Session};

pub const ISSUER: &str = "zta-gateway";
pub const IDENTITY_HEADER: &str = "X-ZTA-Identity";
pub const KEYS_PATH: &str = "/.zta/keys";
pub const ALGORITHM: &str = "EdDSA";
pub const DEFAULT_TOKEN_TTL_SECS: i64 = 300;
/// Old + new during a rotation window.
pub const MAX_ACTIVE_KEYS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityClaims {
    pub iss: String,
    pub sub: String,
    pub aud: String,
    pub iat: i64,
    pub exp: i64,
    pub grp: Vec<String>,
    pub emp: EmploymentType,
    pub dfp: String,
    pub sid: String,
    pub pol: u64,
}

impl IdentityClaims {
    /// Claims for a request admitted on `aud` under policy version `pol`.
    pub fn for_session(
        session: &Session,
        aud: &str,
        pol: u64,
        now: DateTime<Utc>,
        ttl_secs: i64,
    ) -> Self {
        let iat = now.timestamp();
        Self {
            iss: ISSUER.to_string(),
            sub: session.user_id.clone(),
            aud: aud.to_string(),
            iat,
            exp: iat + ttl_secs,
            grp: session.groups.clone(),
            emp: session.employment_type,
            dfp: session.device_fingerprint.clone(),
            sid: session.hashed_id(),
            pol,
        }
        .canonical()
    }

    /// Sorted, de-duplicated groups.
    pub fn canonical(mut self) -> Self {
        self.grp.sort();
        self.grp.dedup();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    alg: String,
    kid: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MintError {
    #[error("invalid claims: {0}")]
    InvalidClaims(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("malformed token")]
    Malformed,
    #[error("unknown key id")]
    UnknownKid,
    #[error("bad signature")]
    BadSignature,
    #[error("token expired")]
    Expired,
    #[error("token issued for another audience")]
    WrongAudience,
    #[error("unexpected issuer")]
    WrongIssuer,
}

impl VerifyError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Malformed => "malformed",
            Self::UnknownKid => "unknown_kid",
            Self::BadSignature => "bad_signature",
            Self::Expired => "expired",
            Self::WrongAudience => "wrong_audience",
            Self::WrongIssuer => "wrong_issuer",
        }
    }
}

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("key set must contain at least one key")]
    EmptyKeySet,
    #[error("bad key encoding: {0}")]
    Encoding(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct SigningKeyPair {
    pub key_id: String,
    signing: SigningKey,
    pub created_at: DateTime<Utc>,
}

impl std::fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("key_id", &self.key_id)
            .field("created_at", &self.created_at)
            .finish_non_exhaustive()
    }
}

fn key_id_for(public: &VerifyingKey) -> String {
    let digest = Sha256::digest(public.as_bytes());
    format!("k-{}", hex::encode(&digest[..8]))
}

impl SigningKeyPair {
    pub fn generate(now: DateTime<Utc>) -> Self {
        Self::from_signing_key(SigningKey::generate(&mut rand::rngs::OsRng), now)
    }

    pub fn from_signing_key(signing: SigningKey, created_at: DateTime<Utc>) -> Self {
        Self {
            key_id: key_id_for(&signing.verifying_key()),
            signing,
            created_at,
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn to_pkcs8_pem(&self) -> String {
        self.signing
            .to_pkcs8_pem(Default::default())
            .expect("ed25519 key encodes")
            .to_string()
    }

    pub fn from_pkcs8_pem(pem: &str, created_at: DateTime<Utc>) -> Result<Self, KeyError> {
        let signing =
            SigningKey::from_pkcs8_pem(pem).map_err(|e| KeyError::Encoding(e.to_string()))?;
        Ok(Self::from_signing_key(signing, created_at))
    }

    pub fn save(&self, path: &Path) -> Result<(), KeyError> {
        crate::util::write_private(path, self.to_pkcs8_pem().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, created_at: DateTime<Utc>) -> Result<Self, KeyError> {
        Self::from_pkcs8_pem(&std::fs::read_to_string(path)?, created_at)
    }
}

/// The gateway's active signing keys, oldest first. Minting uses the newest.
#[derive(Debug, Clone)]
pub struct SigningKeys {
    keys: Vec<SigningKeyPair>,
}

impl SigningKeys {
    pub fn new(initial: SigningKeyPair) -> Self {
        Self {
            keys: vec![initial],
        }
    }

    /// Adds `next` as the minting key, retiring the oldest beyond two.
    pub fn rotate(&mut self, next: SigningKeyPair) {
        self.keys.retain(|k| k.key_id != next.key_id);
        self.keys.push(next);
        while self.keys.len() > MAX_ACTIVE_KEYS {
            self.keys.remove(0);
        }
    }

    pub fn current(&self) -> &SigningKeyPair {
        self.keys.last().expect("at least one key")
    }

    pub fn all(&self) -> &[SigningKeyPair] {
        &self.keys
    }

    pub fn published(&self) -> PublishedKeys {
        PublishedKeys::from_pairs(&self.keys)
    }
}

fn b64(bytes: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(bytes)
}

fn unb64(s: &str) -> Result<Vec<u8>, VerifyError> {
    URL_SAFE_NO_PAD.decode(s).map_err(|_| VerifyError::Malformed)
}

/// Signs `claims` (canonicalized) with `key`.
///
/// Ed25519 signatures are deterministic, so identical claims under the same
/// key produce identical tokens.
pub fn mint(claims: &IdentityClaims, key: &SigningKeyPair) -> Result<String, MintError> {
    if claims.iss != ISSUER {
        return Err(MintError::InvalidClaims("iss must be zta-gateway"));
    }
    if claims.exp <= claims.iat {
        return Err(MintError::InvalidClaims("exp must be after iat"));
    }
    if claims.sub.is_empty() || claims.aud.is_empty() {
        return Err(MintError::InvalidClaims("sub and aud are required"));
    }
    let claims = claims.clone().canonical();
    let header = Header {
        alg: ALGORITHM.to_string(),
        kid: key.key_id.clone(),
    };
    let signing_input = format!(
        "{}.{}",
        b64(&serde_json::to_vec(&header).expect("header serializes")),
        b64(&serde_json::to_vec(&claims).expect("claims serialize")),
    );
    let signature = key.signing.sign(signing_input.as_bytes());
    Ok(format!("{signing_input}.{}", b64(&signature.to_bytes())))
}

/// Public halves of the signing keys, by key id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PublishedKeys {
    keys: BTreeMap<String, VerifyingKey>,
}

impl PublishedKeys {
    pub fn from_pairs(pairs: &[SigningKeyPair]) -> Self {
        Self {
            keys: pairs
                .iter()
                .map(|k| (k.key_id.clone(), k.verifying_key()))
                .collect(),
        }
    }

    /// Parses a key-set document produced by [`publish_keys`].
    pub fn from_json(doc: &str) -> Result<Self, KeyError> {
        let raw: BTreeMap<String, String> =
            serde_json::from_str(doc).map_err(|e| KeyError::Encoding(e.to_string()))?;
        let mut keys = BTreeMap::new();
        for (kid, encoded) in raw {
            let bytes = URL_SAFE_NO_PAD
                .decode(&encoded)
                .map_err(|e| KeyError::Encoding(e.to_string()))?;
            let bytes: [u8; 32] = bytes
                .try_into()
                .map_err(|_| KeyError::Encoding(format!("key {kid} is not 32 bytes")))?;
            let key = VerifyingKey::from_bytes(&bytes)
                .map_err(|e| KeyError::Encoding(e.to_string()))?;
            keys.insert(kid, key);
        }
        Ok(Self { keys })
    }

    pub fn get(&self, kid: &str) -> Option<&VerifyingKey> {
        self.keys.get(kid)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Key-set document: a JSON object mapping key id to base64url public key.
/// Byte-stable for identical input.
pub fn publish_keys(keys: &[SigningKeyPair]) -> Result<String, KeyError> {
    if keys.is_empty() {
        return Err(KeyError::EmptyKeySet);
    }
    let doc: BTreeMap<&str, String> = keys
        .iter()
        .map(|k| (k.key_id.as_str(), b64(k.verifying_key().as_bytes())))
        .collect();
    Ok(serde_json::to_string(&doc).expect("key set serializes"))
}

/// Verifies signature, expiry, audience and issuer, in that order.
pub fn verify(
    token: &str,
    keys: &PublishedKeys,
    expected_aud: &str,
    now: DateTime<Utc>,
) -> Result<IdentityClaims, VerifyError> {
    let mut parts = token.split('.');
    let (Some(h), Some(p), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(VerifyError::Malformed);
    };
    let header: Header = serde_json::from_slice(&unb64(h)?).map_err(|_| VerifyError::Malformed)?;
    if header.alg != ALGORITHM {
        return Err(VerifyError::Malformed);
    }
    let key = keys.get(&header.kid).ok_or(VerifyError::UnknownKid)?;
    let sig_bytes: [u8; 64] = unb64(s)?
        .try_into()
        .map_err(|_| VerifyError::Malformed)?;
    let signature = Signature::from_bytes(&sig_bytes);
    let signing_input = &token[..h.len() + 1 + p.len()];
    key.verify_strict(signing_input.as_bytes(), &signature)
        .map_err(|_| VerifyError::BadSignature)?;

    let claims: IdentityClaims =
        serde_json::from_slice(&unb64(p)?).map_err(|_| VerifyError::Malformed)?;
    if now.timestamp() >= claims.exp {
        return Err(VerifyError::Expired);
    }
    if claims.aud != expected_aud {
        return Err(VerifyError::WrongAudience);
    }
    if claims.iss != ISSUER {
        return Err(VerifyError::WrongIssuer);
    }
    Ok(claims)
}
