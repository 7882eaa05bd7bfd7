//! Access-decision records, the local JSONL journal and log shipping.
//!
//! Every request the gateway sees produces exactly one [`AccessLogRecord`].
//! The record is appended to the local journal before anything else happens,
//! then queued for batch delivery to the control plane. Under queue pressure
//! ALLOW records are sacrificed; DENY and ERROR records are not.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

use crate::control_plane::client::{ControlPlaneClient, LogPostError};
use crate::policy::{AccessDecision, Outcome};

pub const DEFAULT_LOG_FILE: &str = "access.log.jsonl";
pub const QUEUE_CAPACITY: usize = 10_000;
pub const MAX_BATCH: usize = 1_000;
const SHIP_INTERVAL: Duration = Duration::from_secs(1);
const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LogOutcome {
    Allow,
    Deny,
    Error,
}

impl LogOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Allow => "ALLOW",
            Self::Deny => "DENY",
            Self::Error => "ERROR",
        }
    }
}

impl std::str::FromStr for LogOutcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ALLOW" => Ok(Self::Allow),
            "DENY" => Ok(Self::Deny),
            "ERROR" => Ok(Self::Error),
            other => Err(format!("unknown outcome {other:?}")),
        }
    }
}

impl From<Outcome> for LogOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Allow => Self::Allow,
            Outcome::Deny => Self::Deny,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLogRecord {
    pub timestamp: DateTime<Utc>,
    pub gateway_id: String,
    pub sequence: u64,
    pub fingerprint: Option<String>,
    pub user_id: Option<String>,
    pub source_ip: IpAddr,
    pub host: String,
    /// Request path for HTTP, `host:port` target for CONNECT.
    pub path: String,
    pub outcome: LogOutcome,
    pub reason: String,
    pub policy_version: Option<u64>,
    pub latency_us: u64,
}

impl AccessLogRecord {
    pub fn is_droppable(&self) -> bool {
        self.outcome == LogOutcome::Allow
    }
}

/// A record before the logger stamps gateway id and sequence.
#[derive(Debug, Clone)]
pub struct RecordDraft {
    pub timestamp: DateTime<Utc>,
    pub fingerprint: Option<String>,
    pub user_id: Option<String>,
    pub source_ip: IpAddr,
    pub host: String,
    pub path: String,
    pub outcome: LogOutcome,
    pub reason: String,
    pub policy_version: Option<u64>,
    pub latency_us: u64,
}

impl RecordDraft {
    pub fn new(timestamp: DateTime<Utc>, source_ip: IpAddr) -> Self {
        Self {
            timestamp,
            fingerprint: None,
            user_id: None,
            source_ip,
            host: String::new(),
            path: String::new(),
            outcome: LogOutcome::Error,
            reason: String::new(),
            policy_version: None,
            latency_us: 0,
        }
    }

    pub fn decision(mut self, d: &AccessDecision) -> Self {
        self.outcome = d.outcome.into();
        self.reason = d.reason.as_str().to_string();
        self.policy_version = Some(d.policy_version);
        self
    }

    pub fn outcome(mut self, outcome: LogOutcome, reason: &str) -> Self {
        self.outcome = outcome;
        self.reason = reason.to_string();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitOutcome {
    Enqueued,
    /// Enqueued after evicting the oldest queued ALLOW.
    EnqueuedEvicting,
    /// An ALLOW that found no room; it is still in the local journal.
    Dropped,
}

/// Bounded multi-producer queue feeding the shipper.
#[derive(Debug)]
pub struct ShipQueue {
    inner: Mutex<VecDeque<AccessLogRecord>>,
    capacity: usize,
    space: tokio::sync::Notify,
    evicted: AtomicU64,
}

impl ShipQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(VecDeque::with_capacity(capacity.min(QUEUE_CAPACITY))),
            capacity,
            space: tokio::sync::Notify::new(),
            evicted: AtomicU64::new(0),
        }
    }

    #[allow(clippy::result_large_err)]
    fn try_push(&self, record: AccessLogRecord) -> Result<EmitOutcome, AccessLogRecord> {
        let mut q = self.inner.lock().unwrap();
        if q.len() < self.capacity {
            q.push_back(record);
            return Ok(EmitOutcome::Enqueued);
        }
        if let Some(pos) = q.iter().position(AccessLogRecord::is_droppable) {
            q.remove(pos);
            q.push_back(record);
            self.evicted.fetch_add(1, Ordering::Relaxed);
            return Ok(EmitOutcome::EnqueuedEvicting);
        }
        if record.is_droppable() {
            self.evicted.fetch_add(1, Ordering::Relaxed);
            return Ok(EmitOutcome::Dropped);
        }
        Err(record)
    }

    /// Enqueues `record`, waiting for room only when the queue holds nothing
    /// but DENY/ERROR records and `record` is one too.
    pub async fn push(&self, mut record: AccessLogRecord) -> EmitOutcome {
        loop {
            let notified = self.space.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            match self.try_push(record) {
                Ok(outcome) => return outcome,
                Err(back) => record = back,
            }
            notified.await;
        }
    }

    pub fn take_batch(&self, max: usize) -> Vec<AccessLogRecord> {
        let batch: Vec<_> = {
            let mut q = self.inner.lock().unwrap();
            let n = q.len().min(max);
            q.drain(..n).collect()
        };
        if !batch.is_empty() {
            self.space.notify_waiters();
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evicted(&self) -> u64 {
        self.evicted.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> Vec<AccessLogRecord> {
        self.inner.lock().unwrap().iter().cloned().collect()
    }
}

struct Journal {
    file: File,
    next_sequence: u64,
}

/// Stamps, journals and enqueues access records.
pub struct AccessLogger {
    gateway_id: String,
    path: PathBuf,
    journal: Mutex<Journal>,
    queue: Arc<ShipQueue>,
    emitted: AtomicU64,
    write_alarms: AtomicU64,
}

impl std::fmt::Debug for AccessLogger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AccessLogger")
            .field("gateway_id", &self.gateway_id)
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

impl AccessLogger {
    /// Appends to `path`, resuming the sequence after the last record this
    /// gateway wrote there so (gateway id, sequence) stays unique across restarts.
    pub fn open(gateway_id: &str, path: &Path, queue: Arc<ShipQueue>) -> std::io::Result<Self> {
        let next_sequence = if path.exists() {
            read_journal(path)?
                .iter()
                .filter(|r| r.gateway_id == gateway_id)
                .map(|r| r.sequence + 1)
                .max()
                .unwrap_or(1)
        } else {
            1
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            gateway_id: gateway_id.to_string(),
            path: path.to_path_buf(),
            journal: Mutex::new(Journal { file, next_sequence }),
            queue,
            emitted: AtomicU64::new(0),
            write_alarms: AtomicU64::new(0),
        })
    }

    pub fn gateway_id(&self) -> &str {
        &self.gateway_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn queue(&self) -> &Arc<ShipQueue> {
        &self.queue
    }

    pub fn emitted(&self) -> u64 {
        self.emitted.load(Ordering::Relaxed)
    }

    pub fn write_alarms(&self) -> u64 {
        self.write_alarms.load(Ordering::Relaxed)
    }

    /// Journals the record synchronously, then enqueues it for shipping.
    pub async fn emit(&self, draft: RecordDraft) -> EmitOutcome {
        let record = {
            let mut journal = self.journal.lock().unwrap();
            let record = AccessLogRecord {
                timestamp: draft.timestamp.trunc_subsecs(6),
                gateway_id: self.gateway_id.clone(),
                sequence: journal.next_sequence,
                fingerprint: draft.fingerprint,
                user_id: draft.user_id,
                source_ip: draft.source_ip,
                host: draft.host,
                path: draft.path,
                outcome: draft.outcome,
                reason: draft.reason,
                policy_version: draft.policy_version,
                latency_us: draft.latency_us,
            };
            journal.next_sequence += 1;
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            if let Err(e) = journal.file.write_all(&line).and_then(|_| journal.file.flush()) {
                self.write_alarms.fetch_add(1, Ordering::Relaxed);
                tracing::error!(error = %e, path = %self.path.display(), "access log write failed");
            }
            record
        };
        self.emitted.fetch_add(1, Ordering::Relaxed);
        self.queue.push(record).await
    }
}

/// Reads every record in a JSONL journal, skipping torn lines.
pub fn read_journal(path: &Path) -> std::io::Result<Vec<AccessLogRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if let Ok(r) = serde_json::from_str(&line) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Writes matching journal lines to `out`; with `follow`, keeps reading
/// appended lines until the task is cancelled.
pub async fn tail(
    path: &Path,
    outcome: Option<LogOutcome>,
    follow: bool,
    mut out: impl Write,
) -> std::io::Result<()> {
    let mut file = File::open(path)?;
    let mut offset = 0u64;
    let mut partial = String::new();
    loop {
        file.seek(SeekFrom::Start(offset))?;
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            offset += n as u64;
            if !line.ends_with('\n') {
                partial.push_str(&line);
                continue;
            }
            let full = std::mem::take(&mut partial) + &line;
            if let Ok(rec) = serde_json::from_str::<AccessLogRecord>(&full) {
                if outcome.is_none_or(|o| o == rec.outcome) {
                    out.write_all(full.as_bytes())?;
                }
            }
        }
        out.flush()?;
        if !follow {
            return Ok(());
        }
        tokio::time::sleep(Duration::from_millis(250)).await;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShipResult {
    Acknowledged(usize),
    Retry(String),
    TooLarge,
    Rejected(u16),
}

pub async fn ship(batch: &[AccessLogRecord], client: &ControlPlaneClient) -> ShipResult {
    match client.post_logs(batch).await {
        Ok(accepted) => ShipResult::Acknowledged(accepted),
        Err(LogPostError::Status(413)) => ShipResult::TooLarge,
        Err(LogPostError::Status(code)) if (400..500).contains(&code) => ShipResult::Rejected(code),
        Err(e) => ShipResult::Retry(e.to_string()),
    }
}

/// 1 s, 2 s, 4 s ... capped at 30 s.
#[derive(Debug, Clone)]
pub struct Backoff {
    next: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            next: Duration::from_secs(1),
        }
    }
}

impl Backoff {
    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(MAX_BACKOFF);
        d
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

#[derive(Debug, Default)]
pub struct ShipperStats {
    pub shipped: AtomicU64,
    pub batches: AtomicU64,
    pub retries: AtomicU64,
    pub dead_lettered: AtomicU64,
}

fn dead_letter(path: &Path, batch: &[AccessLogRecord]) {
    let result = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| {
            for r in batch {
                let mut line = serde_json::to_vec(r).expect("record serializes");
                line.push(b'\n');
                f.write_all(&line)?;
            }
            f.flush()
        });
    if let Err(e) = result {
        tracing::error!(error = %e, path = %path.display(), "dead-letter write failed");
    }
}

/// Drains the queue to the control plane, at most one batch per second.
///
/// A failed batch stays with the shipper and is retried with backoff; a 413
/// splits the batch; any other 4xx moves it to the dead-letter file.
pub async fn run_shipper(
    queue: Arc<ShipQueue>,
    client: ControlPlaneClient,
    dead_letter_path: PathBuf,
    stats: Arc<ShipperStats>,
) {
    let mut pending: VecDeque<Vec<AccessLogRecord>> = VecDeque::new();
    let mut backoff = Backoff::default();
    let mut ticker = tokio::time::interval(SHIP_INTERVAL);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        if pending.is_empty() {
            ticker.tick().await;
            let batch = queue.take_batch(MAX_BATCH);
            if batch.is_empty() {
                continue;
            }
            pending.push_back(batch);
        }
        let batch = pending.front().expect("nonempty");
        match ship(batch, &client).await {
            ShipResult::Acknowledged(_) => {
                stats.shipped.fetch_add(batch.len() as u64, Ordering::Relaxed);
                stats.batches.fetch_add(1, Ordering::Relaxed);
                pending.pop_front();
                backoff.reset();
            }
            ShipResult::TooLarge if batch.len() > 1 => {
                let mut first = pending.pop_front().expect("nonempty");
                let second = first.split_off(first.len() / 2);
                pending.push_front(second);
                pending.push_front(first);
            }
            ShipResult::TooLarge | ShipResult::Rejected(_) => {
                let batch = pending.pop_front().expect("nonempty");
                tracing::error!(records = batch.len(), "log batch rejected; dead-lettered");
                stats
                    .dead_lettered
                    .fetch_add(batch.len() as u64, Ordering::Relaxed);
                dead_letter(&dead_letter_path, &batch);
            }
            ShipResult::Retry(err) => {
                stats.retries.fetch_add(1, Ordering::Relaxed);
                let delay = backoff.next_delay();
                tracing::warn!(error = %err, ?delay, "log shipping failed; retrying");
                tokio::time::sleep(delay).await;
            }
        }
    }
}
