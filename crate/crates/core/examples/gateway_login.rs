//! Launch the full stack on loopback (control plane, mock IdP, echo app,
//! gateway) and walk one device through SSO to a protected application.

use zta::harness::env::{APP1, APP2, DEVICES};
use zta::harness::idp::FIXTURE_PASSWORD;
use zta::harness::upstream::EchoDump;
use zta::harness::Environment;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let env = Environment::launch().await?;
    println!("gateway on {}", env.gateway.addr());

    let laptop = env.client(DEVICES[0]);
    let first = laptop.get(APP1, "/dashboard").await?;
    println!("no session     -> {} to {}", first.status, first.location().unwrap_or("-"));

    let out = laptop.login(APP1, "/dashboard", "alice", FIXTURE_PASSWORD).await?;
    println!("callback       -> {} to {}", out.callback.status, out.callback.location().unwrap_or("-"));
    println!("landing        -> {}", out.landing.status);

    let forged = laptop.get_with(APP1, "/api", &[("X-ZTA-Identity", "i-am-admin")]).await?;
    let dump: EchoDump = forged.json()?;
    let ids = dump.header_values("x-zta-identity");
    println!("app saw {} identity header(s)", ids.len());
    let claims = env.verify_identity(ids[0], APP1)?;
    println!("  sub={} grp={:?} emp={:?} aud={}", claims.sub, claims.grp, claims.emp, claims.aud);

    let contractor = env.client(DEVICES[1]);
    let denied = contractor.login(APP2, "/", "bob", FIXTURE_PASSWORD).await?.landing;
    println!("bob on {APP2}  -> {} {}", denied.status, denied.text());

    let anonymous = env.anonymous_client();
    match anonymous.get(APP1, "/").await {
        Ok(r) => println!("no device cert -> {}", r.status),
        Err(e) => println!("no device cert -> refused at TLS ({e})"),
    }

    for r in env.local_log() {
        println!("log #{:<2} {:<5} {:<18} {}", r.sequence, r.outcome.as_str(), r.host, r.reason);
    }
    env.shutdown().await;
    Ok(())
}
