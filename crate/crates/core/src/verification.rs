//! Annotator verdicts and the consensus rule for retaining a trajectory.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub const DEFAULT_REQUIRED_ANNOTATORS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationStatus {
    Pending,
    Retained,
    Rejected,
}

impl VerificationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VerificationStatus::Pending => "pending",
            VerificationStatus::Retained => "retained",
            VerificationStatus::Rejected => "rejected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pending" => Some(Self::Pending),
            "retained" => Some(Self::Retained),
            "rejected" => Some(Self::Rejected),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub annotator_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub notes: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub trajectory_id: String,
    pub verdicts: Vec<Verdict>,
    pub status: VerificationStatus,
}

impl VerificationRecord {
    pub fn pending(trajectory_id: impl Into<String>) -> Self {
        Self { trajectory_id: trajectory_id.into(), verdicts: Vec::new(), status: VerificationStatus::Pending }
    }

    /// Stores `verdict`, replacing any earlier one from the same annotator, and
    /// recomputes the status.
    pub fn record(&mut self, verdict: Verdict, required_annotators: usize) {
        match self.verdicts.iter_mut().find(|v| v.annotator_id == verdict.annotator_id) {
            Some(slot) => *slot = verdict,
            None => self.verdicts.push(verdict),
        }
        self.status = consensus(&self.verdicts, required_annotators);
    }
}

/// Any reject rejects; otherwise at least `required` distinct accepts retain.
pub fn consensus(verdicts: &[Verdict], required: usize) -> VerificationStatus {
    if verdicts.iter().any(|v| v.decision == Decision::Reject) {
        return VerificationStatus::Rejected;
    }
    let mut accepted: Vec<&str> = verdicts
        .iter()
        .filter(|v| v.decision == Decision::Accept)
        .map(|v| v.annotator_id.as_str())
        .collect();
    accepted.sort_unstable();
    accepted.dedup();
    if accepted.len() >= required.max(1) {
        VerificationStatus::Retained
    } else {
        VerificationStatus::Pending
    }
}
