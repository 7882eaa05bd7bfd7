//! Run the control plane in-process and drive its /v1 API: mutations bump the
//! policy version, and gateways poll with If-None-Match.

use std::sync::Arc;

use chrono::Utc;
use zta::control_plane::client::{ControlPlaneClient, PolicyFetch};
use zta::control_plane::{router, ControlPlaneState, HttpServer, InitialSettings, LogStore, PolicyStore};
use zta::SystemClock;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let state = ControlPlaneState::new(
        PolicyStore::in_memory(InitialSettings::default(), Utc::now()),
        LogStore::in_memory(10_000),
        "admin-token".into(),
        Some("gateway-token".into()),
        Arc::new(SystemClock),
    );
    let server = HttpServer::bind("127.0.0.1:0".parse()?, router(state.clone(), &["https://console.example".into()])).await?;
    println!("control plane on {}", server.url());

    let admin = ControlPlaneClient::new(&server.url(), Some("admin-token".into()))?.with_actor("example");
    let gateway = ControlPlaneClient::new(&server.url(), Some("gateway-token".into()))?;

    let PolicyFetch::Modified(initial) = gateway.fetch_policy(None).await? else {
        anyhow::bail!("expected a full snapshot");
    };
    println!("gateway sees version {}", initial.version);

    println!("kill switch on  -> v{}", admin.set_kill_switch(true).await?.version);
    println!("revoke laptop   -> v{}", admin.add_revocation(&"9f".repeat(32), "stolen").await?.version);
    println!("kill switch off -> v{}", admin.set_kill_switch(false).await?.version);

    match gateway.fetch_policy(Some(initial.version)).await? {
        PolicyFetch::Modified(s) => println!("gateway poll: new version {}, {} revoked", s.version, s.revoked_fingerprints.len()),
        other => println!("gateway poll: {other:?}"),
    }
    let current = state.snapshot().version;
    println!("gateway poll at v{current}: {:?}", gateway.fetch_policy(Some(current)).await?);
    println!("gateway cannot mutate: {}", gateway.set_kill_switch(true).await.unwrap_err());

    for entry in state.history().await {
        println!("history v{} by {}: {}", entry.version, entry.actor, entry.change);
    }
    server.stop().await;
    Ok(())
}
