//! Open a CONNECT tunnel to a TCP route with a session reference, the way
//! `zta tunnel` does for SSH, then watch the kill switch tear it down.

use std::time::{Duration, Instant};

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use zta::harness::env::{APP1, BASTION, DEVICES};
use zta::harness::idp::FIXTURE_PASSWORD;
use zta::harness::{ConnectResult, EnvOptions, Environment};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let env = Environment::launch_with(EnvOptions {
        poll_interval: Duration::from_millis(500),
        ..EnvOptions::default()
    })
    .await?;
    let laptop = env.client(DEVICES[0]);
    laptop.login(APP1, "/", "alice", FIXTURE_PASSWORD).await?;
    let session = laptop.session_id().expect("logged in");

    if let ConnectResult::Refused(r) = laptop.connect(BASTION, 22, None).await? {
        println!("without a session: {} {}", r.status, r.text());
    }
    let ConnectResult::Established(mut tunnel) = laptop.connect(BASTION, 22, Some(&session)).await? else {
        anyhow::bail!("tunnel refused");
    };
    tunnel.write_all(b"SSH-2.0-example\r\n").await?;
    let mut banner = [0u8; 17];
    tunnel.read_exact(&mut banner).await?;
    println!("echoed through tunnel: {:?}", String::from_utf8_lossy(&banner).trim_end());

    let flipped = Instant::now();
    env.admin.set_kill_switch(true).await?;
    // The gateway drops the connection without a TLS close_notify.
    let mut rest = Vec::new();
    let how = match tunnel.read_to_end(&mut rest).await {
        Ok(_) => "cleanly".to_string(),
        Err(e) => format!("abruptly ({e})"),
    };
    println!("kill switch closed the tunnel {how} after {:?}", flipped.elapsed());
    env.shutdown().await;
    Ok(())
}
