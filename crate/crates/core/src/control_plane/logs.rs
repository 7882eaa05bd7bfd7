use std::collections::{HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::observe::{AccessLogRecord, LogOutcome};

pub const LOG_RING_CAPACITY: usize = 100_000;
pub const MAX_QUERY_LIMIT: usize = 10_000;
pub const DEFAULT_QUERY_LIMIT: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredLog {
    #[serde(flatten)]
    pub record: AccessLogRecord,
    pub received_at: DateTime<Utc>,
}

/// Conjunctive filter. `since` is inclusive on the record timestamp.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<LogOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub since: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl LogQuery {
    pub fn matches(&self, r: &AccessLogRecord) -> bool {
        self.user.as_ref().is_none_or(|u| r.user_id.as_ref() == Some(u))
            && self
                .fingerprint
                .as_ref()
                .is_none_or(|f| r.fingerprint.as_ref() == Some(f))
            && self.host.as_ref().is_none_or(|h| &r.host == h)
            && self.outcome.is_none_or(|o| r.outcome == o)
            && self.since.is_none_or(|s| r.timestamp >= s)
    }

    pub fn effective_limit(&self) -> usize {
        self.limit.unwrap_or(DEFAULT_QUERY_LIMIT)
    }
}

/// Newest first: timestamp desc, sequence desc, then gateway id.
pub fn newest_first(a: &AccessLogRecord, b: &AccessLogRecord) -> std::cmp::Ordering {
    b.timestamp
        .cmp(&a.timestamp)
        .then(b.sequence.cmp(&a.sequence))
        .then(a.gateway_id.cmp(&b.gateway_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("limit {0} exceeds the maximum of {MAX_QUERY_LIMIT}")]
pub struct LimitTooLarge(pub usize);

/// In-memory ring of recent records backed by an append-only JSONL file.
#[derive(Debug)]
pub struct LogStore {
    ring: VecDeque<StoredLog>,
    seen: HashSet<(String, u64)>,
    capacity: usize,
    file: Option<(PathBuf, File)>,
}

impl LogStore {
    pub fn in_memory(capacity: usize) -> Self {
        Self {
            ring: VecDeque::new(),
            seen: HashSet::new(),
            capacity,
            file: None,
        }
    }

    /// Opens `path` for appending and replays its tail into the ring.
    pub fn open(path: &Path, capacity: usize) -> std::io::Result<Self> {
        let mut store = Self::in_memory(capacity);
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                if let Ok(stored) = serde_json::from_str::<StoredLog>(&line?) {
                    store.push(stored);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.file = Some((path.to_path_buf(), file));
        Ok(store)
    }

    fn push(&mut self, stored: StoredLog) -> bool {
        let key = (stored.record.gateway_id.clone(), stored.record.sequence);
        if !self.seen.insert(key) {
            return false;
        }
        if self.ring.len() == self.capacity {
            if let Some(old) = self.ring.pop_front() {
                self.seen.remove(&(old.record.gateway_id, old.record.sequence));
            }
        }
        self.ring.push_back(stored);
        true
    }

    /// Appends new records, dropping (gateway id, sequence) duplicates.
    pub fn ingest(&mut self, batch: Vec<AccessLogRecord>, received_at: DateTime<Utc>) -> std::io::Result<usize> {
        let mut lines = Vec::new();
        let mut accepted = 0;
        for record in batch {
            let stored = StoredLog { record, received_at };
            let line = serde_json::to_vec(&stored).expect("record serializes");
            if self.push(stored) {
                lines.extend_from_slice(&line);
                lines.push(b'\n');
                accepted += 1;
            }
        }
        if let Some((_, f)) = &mut self.file {
            f.write_all(&lines)?;
            f.flush()?;
        }
        Ok(accepted)
    }

    pub fn query(&self, q: &LogQuery) -> Result<Vec<StoredLog>, LimitTooLarge> {
        let limit = q.effective_limit();
        if limit > MAX_QUERY_LIMIT {
            return Err(LimitTooLarge(limit));
        }
        let mut out: Vec<StoredLog> = self.ring.iter().filter(|s| q.matches(&s.record)).cloned().collect();
        out.sort_by(|a, b| newest_first(&a.record, &b.record));
        out.truncate(limit);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(gw: &str, seq: u64, secs: i64, user: &str, outcome: LogOutcome) -> AccessLogRecord {
        AccessLogRecord {
            timestamp: DateTime::from_timestamp(1_760_000_000 + secs, 0).unwrap(),
            gateway_id: gw.into(),
            sequence: seq,
            fingerprint: None,
            user_id: Some(user.into()),
            source_ip: "127.0.0.1".parse().unwrap(),
            host: "app1.corp.test".into(),
            path: "/".into(),
            outcome,
            reason: if outcome == LogOutcome::Allow { "ok".into() } else { "kill_switch".into() },
            policy_version: Some(1),
            latency_us: 1,
        }
    }

    #[test]
    fn dedups_on_gateway_and_sequence() {
        let mut s = LogStore::in_memory(10);
        let batch: Vec<_> = (1..=10).map(|i| rec("gw", i, i as i64, "alice", LogOutcome::Allow)).collect();
        assert_eq!(s.ingest(batch.clone(), Utc::now()).unwrap(), 10);
        assert_eq!(s.ingest(batch, Utc::now()).unwrap(), 0);
        assert_eq!(s.ingest(vec![rec("gw2", 1, 0, "bob", LogOutcome::Deny)], Utc::now()).unwrap(), 1);
    }

    #[test]
    fn query_orders_newest_first_and_limits() {
        let mut s = LogStore::in_memory(100);
        let batch: Vec<_> = (1..=20).map(|i| rec("gw", i, (i / 2) as i64, "alice", LogOutcome::Allow)).collect();
        s.ingest(batch, Utc::now()).unwrap();
        let got = s.query(&LogQuery { limit: Some(5), ..Default::default() }).unwrap();
        let seqs: Vec<_> = got.iter().map(|g| g.record.sequence).collect();
        assert_eq!(seqs, vec![20, 19, 18, 17, 16]);
        assert!(s.query(&LogQuery { limit: Some(10_001), ..Default::default() }).is_err());
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut s = LogStore::in_memory(3);
        let batch: Vec<_> = (1..=5).map(|i| rec("gw", i, i as i64, "alice", LogOutcome::Deny)).collect();
        s.ingest(batch, Utc::now()).unwrap();
        assert_eq!(s.len(), 3);
        let seqs: Vec<_> = s.query(&LogQuery::default()).unwrap().iter().map(|g| g.record.sequence).collect();
        assert_eq!(seqs, vec![5, 4, 3]);
    }

    #[test]
    fn reopen_replays_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs.jsonl");
        {
            let mut s = LogStore::open(&path, 100).unwrap();
            s.ingest((1..=4).map(|i| rec("gw", i, 0, "carol", LogOutcome::Error)).collect(), Utc::now())
                .unwrap();
        }
        let mut s = LogStore::open(&path, 100).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.ingest(vec![rec("gw", 2, 0, "carol", LogOutcome::Error)], Utc::now()).unwrap(), 0);
    }
}
