//! Every decision is journaled locally, then shipped to the control plane
//! where it can be queried.

use std::sync::Arc;

use chrono::Utc;
use zta::control_plane::{LogQuery, LogStore};
use zta::observe::{read_journal, AccessLogger, LogOutcome, RecordDraft, ShipQueue};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("access.log.jsonl");
    let queue = Arc::new(ShipQueue::new(1_000));
    let logger = AccessLogger::open("gw-example", &path, queue.clone())?;

    let decisions = [
        ("alice", "wiki.corp.test", LogOutcome::Allow, "ok"),
        ("bob", "payroll.corp.test", LogOutcome::Deny, "employment_denied"),
        ("alice", "payroll.corp.test", LogOutcome::Deny, "group_denied"),
        ("carol", "wiki.corp.test", LogOutcome::Allow, "ok"),
    ];
    for (user, host, outcome, reason) in decisions {
        let mut d = RecordDraft::new(Utc::now(), "192.0.2.7".parse()?).outcome(outcome, reason);
        d.user_id = Some(user.into());
        d.host = host.into();
        d.path = "/".into();
        logger.emit(d).await;
    }
    println!("journal {} has {} lines", path.display(), read_journal(&path)?.len());

    // What the shipper does, minus the HTTP hop.
    let mut store = LogStore::in_memory(10_000);
    let batch = queue.take_batch(500);
    println!("ingested {} new, then {} on redelivery", store.ingest(batch.clone(), Utc::now())?, store.ingest(batch, Utc::now())?);

    let denies = store.query(&LogQuery {
        outcome: Some(LogOutcome::Deny),
        ..LogQuery::default()
    })?;
    for s in denies {
        let r = s.record;
        println!("DENY #{} {} {} {}", r.sequence, r.user_id.unwrap_or_default(), r.host, r.reason);
    }
    Ok(())
}
