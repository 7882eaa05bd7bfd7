//! Mint the signed identity token the gateway forwards to applications and
//! verify it the way an application would, from the published key set.

use chrono::{Duration, Utc};
use zta::authn::EmploymentType;
use zta::token::{mint, publish_keys, verify, IdentityClaims, PublishedKeys, SigningKeyPair, ISSUER};

fn main() -> anyhow::Result<()> {
    let now = Utc::now();
    let key = SigningKeyPair::generate(now);
    let claims = IdentityClaims {
        iss: ISSUER.into(),
        sub: "alice".into(),
        aud: "wiki.corp.test".into(),
        iat: now.timestamp(),
        exp: (now + Duration::minutes(5)).timestamp(),
        grp: vec!["eng".into()],
        emp: EmploymentType::Fte,
        dfp: "ab".repeat(32),
        sid: "cd".repeat(32),
        pol: 17,
    }
    .canonical();
    let token = mint(&claims, &key)?;
    println!("token ({} bytes): {}...", token.len(), &token[..48]);

    // What GET /.zta/keys returns; applications cache it.
    let doc = publish_keys(std::slice::from_ref(&key))?;
    println!("key set: {doc}");
    let keys = PublishedKeys::from_json(&doc)?;

    let ok = verify(&token, &keys, "wiki.corp.test", now)?;
    println!("verified for {} on {} (policy v{})", ok.sub, ok.aud, ok.pol);
    println!("replayed at another app: {:?}", verify(&token, &keys, "payroll.corp.test", now).unwrap_err());
    println!("after expiry:            {:?}", verify(&token, &keys, "wiki.corp.test", now + Duration::minutes(5)).unwrap_err());
    let mut forged = token.clone();
    forged.replace_range(forged.len() - 4.., "AAAA");
    println!("tampered signature:      {:?}", verify(&forged, &keys, "wiki.corp.test", now).unwrap_err());
    Ok(())
}
