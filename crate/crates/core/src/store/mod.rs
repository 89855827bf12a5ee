//! Append-only trajectory dataset with a sidecar verification ledger.
//!
//! The dataset file holds one trajectory per line and never rewrites a
//! line. The ledger holds `VerificationRecord` snapshots; the last snapshot
//! for an id wins. All mutation goes through `&mut Dataset`, so a single
//! owner (or a lock around it) serializes writers.

mod jsonl;
pub mod stats;
pub mod taxonomy;

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::grammar::{validate_structure_with, GrammarLimits};
use crate::trajectory::{Mode, Trajectory};
use crate::verification::{Decision, VerificationRecord, VerificationStatus, Verdict, DEFAULT_REQUIRED_ANNOTATORS};

pub use jsonl::quarantine_path;
pub use stats::{compute_stats, DatasetStats, ModeCounts, RatioReport, RatioTarget, VerificationCounts};
pub use taxonomy::{Dimension, Taxonomy};

pub const DEFAULT_PAGE_LIMIT: usize = 50;
pub const MAX_PAGE_LIMIT: usize = 500;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("duplicate trajectory id {0}")]
    DuplicateId(String),
    #[error("unknown trajectory id {0}")]
    UnknownId(String),
    #[error("invalid cursor {0:?}")]
    BadCursor(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
    #[error("{0}")]
    Config(String),
    #[error("retained trajectory {id} is structurally invalid: {violations:?}")]
    InvalidRetained { id: String, violations: Vec<String> },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Sidecar ledger path for a dataset: `name.jsonl` becomes `name.ledger.jsonl`.
pub fn default_ledger_path(dataset: &Path) -> PathBuf {
    let stem = dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dataset.with_file_name(format!("{stem}.ledger.jsonl"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ListFilter {
    pub mode: Option<Mode>,
    pub status: Option<VerificationStatus>,
    pub category: Option<String>,
}

#[derive(Debug)]
pub struct Page<'a> {
    pub items: Vec<(&'a Trajectory, VerificationStatus)>,
    /// Opaque position to resume from; None at the end.
    pub next_cursor: Option<String>,
}

pub struct Dataset {
    dataset_path: PathBuf,
    ledger_path: PathBuf,
    records: Vec<Trajectory>,
    by_id: HashMap<String, usize>,
    ledger: HashMap<String, VerificationRecord>,
    required_annotators: usize,
    clock: Arc<dyn Clock>,
    quarantined: Vec<PathBuf>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("dataset_path", &self.dataset_path)
            .field("ledger_path", &self.ledger_path)
            .field("records", &self.records.len())
            .finish()
    }
}

impl Dataset {
    /// Loads (or starts) a dataset. Missing files read as empty and are
    /// created on first write.
    pub fn open(dataset_path: impl Into<PathBuf>, ledger_path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dataset_path = dataset_path.into();
        let ledger_path = ledger_path.into();
        let mut quarantined = Vec::new();

        let loaded = jsonl::load::<Trajectory>(&dataset_path)?;
        quarantined.extend(loaded.quarantined);
        let mut by_id = HashMap::with_capacity(loaded.records.len());
        for (pos, t) in loaded.records.iter().enumerate() {
            if by_id.insert(t.id.clone(), pos).is_some() {
                return Err(StoreError::Corrupt {
                    path: dataset_path,
                    line: pos + 1,
                    message: format!("duplicate trajectory id {}", t.id),
                });
            }
        }

        let ledger_lines = jsonl::load::<VerificationRecord>(&ledger_path)?;
        quarantined.extend(ledger_lines.quarantined);
        let ledger = ledger_lines.records.into_iter().map(|r| (r.trajectory_id.clone(), r)).collect();

        Ok(Self {
            dataset_path,
            ledger_path,
            records: loaded.records,
            by_id,
            ledger,
            required_annotators: DEFAULT_REQUIRED_ANNOTATORS,
            clock: Arc::new(SystemClock),
            quarantined,
        })
    }

    /// Opens with the ledger at [`default_ledger_path`].
    pub fn open_default(dataset_path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dataset_path = dataset_path.into();
        let ledger = default_ledger_path(&dataset_path);
        Self::open(dataset_path, ledger)
    }

    pub fn with_required_annotators(mut self, n: usize) -> Self {
        self.required_annotators = n.max(1);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn dataset_path(&self) -> &Path {
        &self.dataset_path
    }

    pub fn ledger_path(&self) -> &Path {
        &self.ledger_path
    }

    pub fn required_annotators(&self) -> usize {
        self.required_annotators
    }

    /// Files that received torn lines during load.
    pub fn quarantined(&self) -> &[PathBuf] {
        &self.quarantined
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Trajectory] {
        &self.records
    }

    pub fn append(&mut self, trajectory: Trajectory) -> Result<String, StoreError> {
        if self.by_id.contains_key(&trajectory.id) {
            return Err(StoreError::DuplicateId(trajectory.id));
        }
        jsonl::append(&self.dataset_path, &trajectory)?;
        let id = trajectory.id.clone();
        self.by_id.insert(id.clone(), self.records.len());
        self.records.push(trajectory);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<&Trajectory, StoreError> {
        self.by_id.get(id).map(|&i| &self.records[i]).ok_or_else(|| StoreError::UnknownId(id.to_string()))
    }

    pub fn status(&self, id: &str) -> VerificationStatus {
        self.ledger.get(id).map_or(VerificationStatus::Pending, |r| r.status)
    }

    pub fn verification(&self, id: &str) -> Result<VerificationRecord, StoreError> {
        self.get(id)?;
        Ok(self.ledger.get(id).cloned().unwrap_or_else(|| VerificationRecord::pending(id)))
    }

    /// Insertion-ordered page. The cursor is a record position, so pages
    /// stay stable while new records are appended.
    pub fn list(&self, filter: &ListFilter, cursor: Option<&str>, limit: usize) -> Result<Page<'_>, StoreError> {
        let start = match cursor {
            None => 0,
            Some(c) => c.parse::<usize>().map_err(|_| StoreError::BadCursor(c.to_string()))?,
        };
        if start > self.records.len() {
            return Err(StoreError::BadCursor(start.to_string()));
        }
        let limit = limit.clamp(1, MAX_PAGE_LIMIT);
        let mut items = Vec::new();
        let mut next_cursor = None;
        for (pos, t) in self.records.iter().enumerate().skip(start) {
            let status = self.status(&t.id);
            let keep = filter.mode.is_none_or(|m| m == t.mode)
                && filter.status.is_none_or(|s| s == status)
                && filter.category.as_ref().is_none_or(|c| t.category.as_ref() == Some(c));
            if !keep {
                continue;
            }
            if items.len() == limit {
                next_cursor = Some(pos.to_string());
                break;
            }
            items.push((t, status));
        }
        Ok(Page { items, next_cursor })
    }

    /// Stores a verdict (replacing the annotator's earlier one) and appends
    /// the new ledger snapshot.
    pub fn record_verdict(
        &mut self,
        id: &str,
        annotator_id: &str,
        decision: Decision,
        notes: &str,
    ) -> Result<VerificationRecord, StoreError> {
        self.get(id)?;
        let mut record = self.ledger.get(id).cloned().unwrap_or_else(|| VerificationRecord::pending(id));
        let verdict = Verdict {
            annotator_id: annotator_id.to_string(),
            decision,
            notes: notes.to_string(),
            timestamp: self.clock.now(),
        };
        record.record(verdict, self.required_annotators);
        jsonl::append(&self.ledger_path, &record)?;
        self.ledger.insert(id.to_string(), record.clone());
        Ok(record)
    }

    pub fn stats(&self, taxonomy: &Taxonomy, target: &RatioTarget) -> DatasetStats {
        compute_stats(self.records.iter().map(|t| (t, self.status(&t.id))), taxonomy, target)
    }

    /// Writes every Retained trajectory, in insertion order, with its
    /// verification record attached. Nothing is written if any retained
    /// record fails the grammar check.
    pub fn export_retained(&self, out: &Path, limits: &GrammarLimits) -> Result<usize, StoreError> {
        let mut retained = Vec::new();
        for t in &self.records {
            let Some(record) = self.ledger.get(&t.id).filter(|r| r.status == VerificationStatus::Retained) else {
                continue;
            };
            let report = validate_structure_with(t, limits);
            if !report.valid {
                return Err(StoreError::InvalidRetained { id: t.id.clone(), violations: report.violations });
            }
            let mut t = t.clone();
            t.verification = Some(record.clone());
            retained.push(t);
        }
        jsonl::write_all(out, &retained)?;
        Ok(retained.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FixedClock;
    use crate::fixtures::{direct, multistep, reflection};
    use chrono::DateTime;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn with_id(mut t: Trajectory, id: &str) -> Trajectory {
        t.id = id.into();
        t
    }

    fn open(dir: &Path) -> Dataset {
        Dataset::open_default(dir.join("data.jsonl"))
            .unwrap()
            .with_clock(Arc::new(FixedClock(DateTime::from_timestamp(1_700_000_000, 0).unwrap())))
    }

    #[test]
    fn append_get_round_trip_and_reload() {
        let d = tmp();
        let mut ds = open(d.path());
        let t = with_id(reflection(3), "a");
        ds.append(t.clone()).unwrap();
        assert_eq!(ds.get("a").unwrap(), &t);
        let ds = open(d.path());
        assert_eq!(ds.get("a").unwrap(), &t);
        assert!(matches!(ds.get("b"), Err(StoreError::UnknownId(_))));
    }

    #[test]
    fn duplicate_append_fails() {
        let d = tmp();
        let mut ds = open(d.path());
        ds.append(with_id(direct(), "a")).unwrap();
        assert!(matches!(ds.append(with_id(direct(), "a")), Err(StoreError::DuplicateId(_))));
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn list_filters_and_pages() {
        let d = tmp();
        let mut ds = open(d.path());
        ds.append(with_id(direct(), "d")).unwrap();
        ds.append(with_id(reflection(2), "r")).unwrap();
        for i in 0..5 {
            ds.append(with_id(multistep(1), &format!("m{i}"))).unwrap();
        }
        let f = ListFilter { mode: Some(Mode::Direct), ..Default::default() };
        assert_eq!(ds.list(&f, None, 10).unwrap().items.len(), 1);

        let f = ListFilter { mode: Some(Mode::MultiStep), ..Default::default() };
        let p1 = ds.list(&f, None, 2).unwrap();
        let ids: Vec<_> = p1.items.iter().map(|(t, _)| t.id.as_str()).collect();
        assert_eq!(ids, ["m0", "m1"]);
        let c1 = p1.next_cursor.unwrap();
        let c2 = ds.list(&f, Some(&c1), 2).unwrap().next_cursor;
        ds.append(with_id(multistep(1), "late")).unwrap();
        assert_eq!(ds.list(&f, Some(&c1), 2).unwrap().next_cursor, c2);
        let p3 = ds.list(&f, c2.as_deref(), 10).unwrap();
        let ids: Vec<_> = p3.items.iter().map(|(t, _)| t.id.as_str()).collect();
        assert_eq!(ids, ["m4", "late"]);
        assert!(p3.next_cursor.is_none());
        assert!(ds.list(&f, Some("x"), 1).is_err());
    }

    #[test]
    fn verdicts_and_consensus() {
        let d = tmp();
        let mut ds = open(d.path());
        for id in ["a", "b", "c"] {
            ds.append(with_id(direct(), id)).unwrap();
        }
        assert_eq!(ds.record_verdict("a", "x", Decision::Accept, "").unwrap().status, VerificationStatus::Pending);
        assert_eq!(ds.record_verdict("a", "y", Decision::Accept, "").unwrap().status, VerificationStatus::Retained);
        ds.record_verdict("b", "x", Decision::Accept, "").unwrap();
        assert_eq!(ds.record_verdict("b", "y", Decision::Reject, "blurry").unwrap().status, VerificationStatus::Rejected);
        // Re-vote by the same annotator does not reach quorum.
        ds.record_verdict("c", "x", Decision::Accept, "").unwrap();
        let r = ds.record_verdict("c", "x", Decision::Accept, "").unwrap();
        assert_eq!((r.status, r.verdicts.len()), (VerificationStatus::Pending, 1));
        assert!(matches!(ds.record_verdict("zz", "x", Decision::Accept, ""), Err(StoreError::UnknownId(_))));

        let ds = open(d.path());
        assert_eq!(ds.status("a"), VerificationStatus::Retained);
        assert_eq!(ds.status("b"), VerificationStatus::Rejected);
        assert_eq!(ds.status("c"), VerificationStatus::Pending);
    }

    #[test]
    fn export_writes_only_retained() {
        let d = tmp();
        let mut ds = open(d.path());
        for i in 0..7 {
            ds.append(with_id(direct(), &format!("t{i}"))).unwrap();
        }
        let out = d.path().join("out.jsonl");
        assert_eq!(ds.export_retained(&out, &GrammarLimits::default()).unwrap(), 0);
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
        for id in ["t1", "t3", "t5"] {
            ds.record_verdict(id, "x", Decision::Accept, "").unwrap();
            ds.record_verdict(id, "y", Decision::Accept, "").unwrap();
        }
        assert_eq!(ds.export_retained(&out, &GrammarLimits::default()).unwrap(), 3);
        let text = std::fs::read_to_string(&out).unwrap();
        let ids: Vec<String> = text.lines().map(|l| Trajectory::from_json_line(l).unwrap().id).collect();
        assert_eq!(ids, ["t1", "t3", "t5"]);
        assert!(text.lines().all(|l| Trajectory::from_json_line(l).unwrap().verification.is_some()));
    }

    #[test]
    fn export_aborts_on_invalid_retained() {
        let d = tmp();
        let mut ds = open(d.path());
        let mut bad = with_id(reflection(2), "bad");
        bad.segments.pop();
        ds.append(bad).unwrap();
        ds.record_verdict("bad", "x", Decision::Accept, "").unwrap();
        ds.record_verdict("bad", "y", Decision::Accept, "").unwrap();
        let out = d.path().join("out.jsonl");
        assert!(matches!(ds.export_retained(&out, &GrammarLimits::default()), Err(StoreError::InvalidRetained { .. })));
        assert!(!out.exists());
    }

    #[test]
    fn torn_tail_is_quarantined() {
        let d = tmp();
        let path = d.path().join("data.jsonl");
        let mut ds = open(d.path());
        ds.append(with_id(direct(), "a")).unwrap();
        ds.append(with_id(direct(), "b")).unwrap();
        let good_len = std::fs::metadata(&path).unwrap().len();
        let line = with_id(direct(), "c").to_json_line().unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&line.as_bytes()[..line.len() / 2]);
        std::fs::write(&path, bytes).unwrap();

        let mut ds = open(d.path());
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.quarantined(), [quarantine_path(&path)]);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), good_len);
        ds.append(with_id(direct(), "c")).unwrap();
        assert_eq!(open(d.path()).len(), 3);
    }

    #[test]
    fn corrupt_middle_line_fails() {
        let d = tmp();
        let path = d.path().join("data.jsonl");
        let good = with_id(direct(), "a").to_json_line().unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n{good}\n")).unwrap();
        assert!(matches!(Dataset::open_default(&path), Err(StoreError::Corrupt { line: 2, .. })));
    }

    #[test]
    fn stats_counts() {
        let d = tmp();
        let mut ds = open(d.path());
        for i in 0..10 {
            ds.append(with_id(direct(), &format!("t{i}"))).unwrap();
        }
        for i in 0..5 {
            ds.record_verdict(&format!("t{i}"), "x", Decision::Accept, "").unwrap();
            ds.record_verdict(&format!("t{i}"), "y", Decision::Accept, "").unwrap();
        }
        let s = ds.stats(&Taxonomy::default(), &RatioTarget::default());
        assert_eq!(s.verification, VerificationCounts { pending: 5, retained: 5, rejected: 0 });
        assert_eq!(s.modes.direct, 10);
    }
}
