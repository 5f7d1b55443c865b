//! Durable service state: the labeling queue, stored trajectories and the
//! dispatch audit trail, each an append-only journal under the data dir.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thinkact_core::action::DispatchRecord;
use thinkact_core::reward::{Candidate, ConsistencyLabel, LabelSource, Preferred, TaskKind};
use thinkact_core::train::OptimStep;

use crate::files::{read_jsonl, FileError};
use crate::journal::Journal;

pub const DATA_DIR_ENV: &str = "THINKACT_DATA_DIR";
pub const LEASE_MS: i64 = 10 * 60 * 1000;
/// Extra superseded queue events tolerated before the journal is compacted.
pub const COMPACT_SLACK: usize = 256;

/// Ids used in URLs and file names: 1 to 64 of `[A-Za-z0-9_-]`.
pub fn valid_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

pub fn rfc3339(unix_ms: i64) -> String {
    chrono::DateTime::from_timestamp_millis(unix_ms)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_default()
}

/// Layout of the data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// The directory named by `THINKACT_DATA_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(DATA_DIR_ENV).map(Self::new)
    }

    pub fn tasks(&self) -> PathBuf {
        self.root.join("tasks.jsonl")
    }

    pub fn queue_journal(&self) -> PathBuf {
        self.root.join("journal").join("queue.jsonl")
    }

    pub fn trajectory_journal(&self) -> PathBuf {
        self.root.join("journal").join("trajectories.jsonl")
    }

    pub fn audit_journal(&self) -> PathBuf {
        self.root.join("journal").join("audit.jsonl")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn checkpoint(&self, id: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{id}.json"))
    }

    pub fn consistency_model(&self) -> PathBuf {
        self.root.join("models").join("consistency.json")
    }

    pub fn preference_model(&self) -> PathBuf {
        self.root.join("models").join("preference.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QueueStatus {
    Pending,
    Labeled,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueItem {
    pub pair_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    pub trajectory_a: String,
    pub trajectory_b: String,
    pub status: QueueStatus,
    pub label: Option<Preferred>,
    pub labeler: Option<String>,
    pub labeled_at: Option<String>,
    pub enqueued_at_ms: i64,
    /// Set while a labeler holds the item; a PENDING item whose lease has
    /// passed is available again.
    pub leased_until_ms: Option<i64>,
}

impl QueueItem {
    fn available(&self, now_ms: i64) -> bool {
        self.status == QueueStatus::Pending && self.leased_until_ms.is_none_or(|t| t <= now_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum QueueEvent {
    Item(QueueItem),
    Leased {
        pair_id: String,
        until_ms: i64,
    },
    Labeled {
        pair_id: String,
        label: Preferred,
        labeler: String,
        at_ms: i64,
    },
    Skipped {
        pair_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub id: String,
    pub task_id: String,
    pub kind: TaskKind,
    pub gold: String,
    pub document: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEntry {
    pub trajectory_id: String,
    pub record: DispatchRecord,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    File(#[from] FileError),
}

pub struct Store {
    dir: DataDir,
    queue: BTreeMap<String, QueueItem>,
    order: Vec<String>,
    queue_journal: Journal<QueueEvent>,
    trajectories: BTreeMap<String, Arc<TrajectoryRecord>>,
    trajectory_journal: Journal<TrajectoryRecord>,
    audit_journal: Journal<AuditEntry>,
}

impl Store {
    /// Replays the journals under `dir`, compacting the queue journal if
    /// it has grown.
    pub fn open(dir: DataDir) -> Result<Self, StoreError> {
        let (queue_journal, events) = Journal::open(&dir.queue_journal())?;
        let (trajectory_journal, records) = Journal::open(&dir.trajectory_journal())?;
        let (audit_journal, _) = Journal::<AuditEntry>::open(&dir.audit_journal())?;
        let mut store = Self {
            dir,
            queue: BTreeMap::new(),
            order: Vec::new(),
            queue_journal,
            trajectories: BTreeMap::new(),
            trajectory_journal,
            audit_journal,
        };
        for ev in events {
            store.apply(ev);
        }
        for r in records {
            store.trajectories.insert(r.id.clone(), Arc::new(r));
        }
        store.maybe_compact()?;
        Ok(store)
    }

    pub fn dir(&self) -> &DataDir {
        &self.dir
    }

    fn apply(&mut self, ev: QueueEvent) {
        match ev {
            QueueEvent::Item(item) => {
                if !self.queue.contains_key(&item.pair_id) {
                    self.order.push(item.pair_id.clone());
                }
                self.queue.insert(item.pair_id.clone(), item);
            }
            QueueEvent::Leased { pair_id, until_ms } => {
                if let Some(item) = self.queue.get_mut(&pair_id) {
                    item.leased_until_ms = Some(until_ms);
                }
            }
            QueueEvent::Labeled {
                pair_id,
                label,
                labeler,
                at_ms,
            } => {
                if let Some(item) = self
                    .queue
                    .get_mut(&pair_id)
                    .filter(|i| i.status == QueueStatus::Pending)
                {
                    item.status = QueueStatus::Labeled;
                    item.label = Some(label);
                    item.labeler = Some(labeler);
                    item.labeled_at = Some(rfc3339(at_ms));
                    item.leased_until_ms = None;
                }
            }
            QueueEvent::Skipped { pair_id } => {
                if let Some(item) = self
                    .queue
                    .get_mut(&pair_id)
                    .filter(|i| i.status == QueueStatus::Pending)
                {
                    item.status = QueueStatus::Skipped;
                    item.leased_until_ms = None;
                }
            }
        }
    }

    /// Journals `ev`, then applies it. Nothing changes if the write fails.
    fn commit(&mut self, ev: QueueEvent) -> Result<(), StoreError> {
        self.queue_journal.append(&ev)?;
        self.apply(ev);
        self.maybe_compact()
    }

    fn maybe_compact(&mut self) -> Result<(), StoreError> {
        if self.queue_journal.len() > self.queue.len() + COMPACT_SLACK {
            self.compact()?;
        }
        Ok(())
    }

    /// Rewrites the queue journal as one event per item.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        let snapshot: Vec<QueueEvent> = self
            .order
            .iter()
            .map(|id| QueueEvent::Item(self.queue[id].clone()))
            .collect();
        self.queue_journal.compact(&snapshot)?;
        Ok(())
    }

    pub fn queue_journal_len(&self) -> usize {
        self.queue_journal.len()
    }

    pub fn enqueue(
        &mut self,
        pair_id: Option<String>,
        task_id: Option<String>,
        trajectory_a: String,
        trajectory_b: String,
        now_ms: i64,
    ) -> Result<QueueItem, StoreError> {
        let pair_id = pair_id.unwrap_or_else(|| format!("p{:06}", self.order.len() + 1));
        if !valid_id(&pair_id) {
            return Err(StoreError::Invalid(format!("bad pair id {pair_id:?}")));
        }
        if let Some(t) = &task_id {
            if !valid_id(t) {
                return Err(StoreError::Invalid(format!("bad task id {t:?}")));
            }
        }
        if trajectory_a == trajectory_b {
            return Err(StoreError::Invalid("a pair needs two different trajectories".into()));
        }
        if self.queue.contains_key(&pair_id) {
            return Err(StoreError::Conflict(format!("pair {pair_id} already queued")));
        }
        let item = QueueItem {
            pair_id: pair_id.clone(),
            task_id,
            trajectory_a,
            trajectory_b,
            status: QueueStatus::Pending,
            label: None,
            labeler: None,
            labeled_at: None,
            enqueued_at_ms: now_ms,
            leased_until_ms: None,
        };
        self.commit(QueueEvent::Item(item))?;
        Ok(self.queue[&pair_id].clone())
    }

    /// Leases the oldest available PENDING item for [`LEASE_MS`].
    pub fn lease_next(&mut self, now_ms: i64) -> Result<Option<QueueItem>, StoreError> {
        let Some(pair_id) = self.order.iter().find(|id| self.queue[*id].available(now_ms)).cloned() else {
            return Ok(None);
        };
        self.commit(QueueEvent::Leased {
            pair_id: pair_id.clone(),
            until_ms: now_ms + LEASE_MS,
        })?;
        Ok(Some(self.queue[&pair_id].clone()))
    }

    /// PENDING → LABELED, exactly once.
    pub fn label(
        &mut self,
        pair_id: &str,
        label: Preferred,
        labeler: &str,
        now_ms: i64,
    ) -> Result<QueueItem, StoreError> {
        let item = self
            .queue
            .get(pair_id)
            .ok_or_else(|| StoreError::NotFound(format!("pair {pair_id}")))?;
        if item.status != QueueStatus::Pending {
            return Err(StoreError::Conflict(format!("pair {pair_id} is {:?}", item.status)));
        }
        if !valid_id(labeler) {
            return Err(StoreError::Invalid(format!("bad labeler {labeler:?}")));
        }
        self.commit(QueueEvent::Labeled {
            pair_id: pair_id.to_string(),
            label,
            labeler: labeler.to_string(),
            at_ms: now_ms,
        })?;
        Ok(self.queue[pair_id].clone())
    }

    pub fn skip(&mut self, pair_id: &str) -> Result<QueueItem, StoreError> {
        let item = self
            .queue
            .get(pair_id)
            .ok_or_else(|| StoreError::NotFound(format!("pair {pair_id}")))?;
        if item.status != QueueStatus::Pending {
            return Err(StoreError::Conflict(format!("pair {pair_id} is {:?}", item.status)));
        }
        self.commit(QueueEvent::Skipped {
            pair_id: pair_id.to_string(),
        })?;
        Ok(self.queue[pair_id].clone())
    }

    pub fn item(&self, pair_id: &str) -> Option<&QueueItem> {
        self.queue.get(pair_id)
    }

    /// Items in enqueue order.
    pub fn items(&self) -> impl Iterator<Item = &QueueItem> {
        self.order.iter().map(|id| &self.queue[id])
    }

    /// Labeled pairs as HUMAN-source labels. `gold_of` supplies each task's
    /// gold answer.
    pub fn human_labels(&self, gold_of: impl Fn(&str) -> String) -> Vec<ConsistencyLabel> {
        labels_from(self.items(), gold_of)
    }

    pub fn store_trajectory(
        &mut self,
        task_id: &str,
        kind: TaskKind,
        gold: &str,
        document: String,
        now_ms: i64,
        audit: &[DispatchRecord],
    ) -> Result<TrajectoryRecord, StoreError> {
        let record = TrajectoryRecord {
            id: format!("tr{:06}", self.trajectories.len() + 1),
            task_id: task_id.to_string(),
            kind,
            gold: gold.to_string(),
            document,
            created_at: rfc3339(now_ms),
        };
        for r in audit {
            self.audit_journal.append(&AuditEntry {
                trajectory_id: record.id.clone(),
                record: r.clone(),
            })?;
        }
        self.trajectory_journal.append(&record)?;
        self.trajectories.insert(record.id.clone(), Arc::new(record.clone()));
        Ok(record)
    }

    pub fn trajectory(&self, id: &str) -> Option<&TrajectoryRecord> {
        self.trajectories.get(id).map(|t| &**t)
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Arc<TrajectoryRecord>> {
        self.trajectories.values()
    }
}

pub fn labels_from<'a>(
    items: impl IntoIterator<Item = &'a QueueItem>,
    gold_of: impl Fn(&str) -> String,
) -> Vec<ConsistencyLabel> {
    items
        .into_iter()
        .filter_map(|item| {
            let label = item.label?;
            let gold = item.task_id.as_deref().map(&gold_of).unwrap_or_default();
            let candidate = |side: &str, document: &String| Candidate {
                id: format!("{}/{side}", item.pair_id),
                document: document.clone(),
                gold: gold.clone(),
            };
            ConsistencyLabel::new(
                candidate("a", &item.trajectory_a),
                candidate("b", &item.trajectory_b),
                label,
                LabelSource::Human,
            )
            .ok()
        })
        .collect()
}

/// The steps of optimization run `run_id`.
pub fn read_run_steps(dir: &DataDir, run_id: &str) -> Result<Vec<OptimStep>, StoreError> {
    let path = dir.run_dir(run_id).join("steps.jsonl");
    if !valid_id(run_id) || !path.exists() {
        return Err(StoreError::NotFound(format!("run {run_id}")));
    }
    Ok(read_jsonl(&path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn open(dir: &Path) -> Store {
        Store::open(DataDir::new(dir)).unwrap()
    }

    #[test]
    fn test_label_state_machine() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let item = s.enqueue(None, None, "a".into(), "b".into(), 0).unwrap();
        assert_eq!(item.pair_id, "p000001");
        assert!(matches!(
            s.label("nope", Preferred::A, "ann", 1),
            Err(StoreError::NotFound(_))
        ));
        let done = s.label("p000001", Preferred::B, "ann", 5).unwrap();
        assert_eq!((done.status, done.label), (QueueStatus::Labeled, Some(Preferred::B)));
        assert_eq!(done.labeled_at.as_deref(), Some("1970-01-01T00:00:00.005Z"));
        assert!(matches!(
            s.label("p000001", Preferred::A, "bob", 6),
            Err(StoreError::Conflict(_))
        ));
        assert!(matches!(s.skip("p000001"), Err(StoreError::Conflict(_))));
        assert!(s.lease_next(7).unwrap().is_none());
    }

    #[test]
    fn test_lease_expiry() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        s.enqueue(None, None, "a".into(), "b".into(), 0).unwrap();
        s.enqueue(None, None, "c".into(), "d".into(), 0).unwrap();
        assert_eq!(s.lease_next(0).unwrap().unwrap().pair_id, "p000001");
        assert_eq!(s.lease_next(1).unwrap().unwrap().pair_id, "p000002");
        assert!(s.lease_next(LEASE_MS - 1).unwrap().is_none());
        let again = s.lease_next(LEASE_MS).unwrap().unwrap();
        assert_eq!(
            (again.pair_id.as_str(), again.status),
            ("p000001", QueueStatus::Pending)
        );
    }

    #[test]
    fn test_restart_preserves_state() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = open(dir.path());
            for i in 0..5 {
                s.enqueue(None, Some("t1".into()), format!("a{i}"), format!("b{i}"), 0)
                    .unwrap();
            }
            s.label("p000002", Preferred::A, "ann", 1).unwrap();
            s.skip("p000003").unwrap();
            s.lease_next(2).unwrap();
        }
        let s = open(dir.path());
        let statuses: Vec<_> = s.items().map(|i| i.status).collect();
        use QueueStatus::*;
        assert_eq!(statuses, [Pending, Labeled, Skipped, Pending, Pending]);
        assert_eq!(s.item("p000001").unwrap().leased_until_ms, Some(2 + LEASE_MS));
        let labels = s.human_labels(|_| "gold".into());
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].source, LabelSource::Human);
        assert_eq!(labels[0].a.gold, "gold");
    }

    #[test]
    fn test_compaction_keeps_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        s.enqueue(None, None, "a".into(), "b".into(), 0).unwrap();
        s.enqueue(None, None, "c".into(), "d".into(), 0).unwrap();
        for t in 0..(COMPACT_SLACK as i64 * 2) {
            s.lease_next(t * LEASE_MS).unwrap();
        }
        assert!(s.queue_journal_len() <= 2 + COMPACT_SLACK + 1);
        s.label("p000002", Preferred::A, "ann", 0).unwrap();
        let before: Vec<_> = s.items().cloned().collect();
        drop(s);
        let s = open(dir.path());
        assert_eq!(s.items().cloned().collect::<Vec<_>>(), before);
    }

    #[test]
    fn test_enqueue_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        assert!(matches!(
            s.enqueue(None, None, "a".into(), "a".into(), 0),
            Err(StoreError::Invalid(_))
        ));
        assert!(matches!(
            s.enqueue(Some("../x".into()), None, "a".into(), "b".into(), 0),
            Err(StoreError::Invalid(_))
        ));
        s.enqueue(Some("x".into()), None, "a".into(), "b".into(), 0).unwrap();
        assert!(matches!(
            s.enqueue(Some("x".into()), None, "a".into(), "c".into(), 0),
            Err(StoreError::Conflict(_))
        ));
    }

    #[test]
    fn test_trajectories_persist() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let mut s = open(dir.path());
            s.store_trajectory("t1", TaskKind::Action, "2", "<answer>2</answer>".into(), 0, &[])
                .unwrap()
                .id
        };
        let s = open(dir.path());
        assert_eq!(s.trajectory(&id).unwrap().document, "<answer>2</answer>");
        assert!(matches!(read_run_steps(s.dir(), "r1"), Err(StoreError::NotFound(_))));
        assert!(matches!(
            read_run_steps(s.dir(), "../etc"),
            Err(StoreError::NotFound(_))
        ));
    }
}
