//! Dataset counts and mode-ratio deviation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::taxonomy::Taxonomy;
use crate::trajectory::{Mode, Trajectory};
use crate::verification::VerificationStatus;

/// Target mix of non-filtered modes as relative weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioTarget {
    pub direct: f64,
    pub reflection: f64,
    pub multi_step: f64,
    /// Deviations above this are flagged.
    pub tolerance: f64,
}

impl Default for RatioTarget {
    fn default() -> Self {
        Self { direct: 1.0, reflection: 2.0, multi_step: 2.0, tolerance: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub direct: usize,
    pub reflection: usize,
    pub multi_step: usize,
    pub filtered: usize,
}

impl ModeCounts {
    pub fn add(&mut self, mode: Mode) {
        match mode {
            Mode::Direct => self.direct += 1,
            Mode::Reflection => self.reflection += 1,
            Mode::MultiStep => self.multi_step += 1,
            Mode::Filtered => self.filtered += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.direct + self.reflection + self.multi_step + self.filtered
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationCounts {
    pub pending: usize,
    pub retained: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFractions {
    pub direct: f64,
    pub reflection: f64,
    pub multi_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub target: ModeFractions,
    /// None when there are no non-filtered records.
    pub observed: Option<ModeFractions>,
    /// Largest absolute difference between observed and target fractions.
    pub deviation: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub modes: ModeCounts,
    pub categories: BTreeMap<String, usize>,
    pub uncategorized: usize,
    /// Labels present in the data but absent from the taxonomy.
    pub unknown_categories: Vec<String>,
    pub verification: VerificationCounts,
    pub ratio: RatioReport,
}

fn fractions(d: f64, r: f64, m: f64) -> ModeFractions {
    let sum = d + r + m;
    ModeFractions { direct: d / sum, reflection: r / sum, multi_step: m / sum }
}

pub fn compute_stats<'a>(
    records: impl IntoIterator<Item = (&'a Trajectory, VerificationStatus)>,
    taxonomy: &Taxonomy,
    target: &RatioTarget,
) -> DatasetStats {
    let mut modes = ModeCounts::default();
    let mut categories = BTreeMap::new();
    let mut uncategorized = 0;
    let mut verification = VerificationCounts::default();
    for (t, status) in records {
        modes.add(t.mode);
        match &t.category {
            Some(c) => *categories.entry(c.clone()).or_insert(0) += 1,
            None => uncategorized += 1,
        }
        match status {
            VerificationStatus::Pending => verification.pending += 1,
            VerificationStatus::Retained => verification.retained += 1,
            VerificationStatus::Rejected => verification.rejected += 1,
        }
    }

    let target_f = fractions(target.direct, target.reflection, target.multi_step);
    let kept = modes.direct + modes.reflection + modes.multi_step;
    let observed = (kept > 0).then(|| fractions(modes.direct as f64, modes.reflection as f64, modes.multi_step as f64));
    let deviation = observed.as_ref().map(|o| {
        (o.direct - target_f.direct)
            .abs()
            .max((o.reflection - target_f.reflection).abs())
            .max((o.multi_step - target_f.multi_step).abs())
    });
    let flagged = deviation.is_none_or(|d| d > target.tolerance);

    let unknown_categories = categories.keys().filter(|c| !taxonomy.contains(c)).cloned().collect();
    DatasetStats {
        total: modes.total(),
        modes,
        categories,
        uncategorized,
        unknown_categories,
        verification,
        ratio: RatioReport { target: target_f, observed, deviation, flagged },
    }
}
