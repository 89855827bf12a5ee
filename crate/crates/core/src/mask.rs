//! Segment-level SFT loss masks.
//!
//! The loss-bearing set per mode:
//!
//! - Direct: {G1, E1}
//! - Reflection with K generations: {E_{K-1}, R_{K-1}, G_K, E_K}
//! - MultiStep with N sub-steps: {E1} and every S_i, G_i, E_i for i in 2..=N+1
//!
//! Everything else, including the instruction and references the model
//! conditions on, is loss=false. The trainer expands each bit over the
//! segment's token span.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{count_images, validate_structure_with, GrammarLimits};
use crate::trajectory::{Mode, SegmentKind, Trajectory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("trajectory {0} is filtered and has no training targets")]
    Filtered(String),
    #[error("trajectory {id} is structurally invalid: {violations:?}")]
    Invalid { id: String, violations: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub kind: SegmentKind,
    pub index: u32,
    pub loss: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub trajectory_id: String,
    pub mode: Mode,
    pub entries: Vec<MaskEntry>,
}

impl LossMask {
    pub fn loss_set(&self) -> impl Iterator<Item = (SegmentKind, u32)> + '_ {
        self.entries.iter().filter(|e| e.loss).map(|e| (e.kind, e.index))
    }
}

pub fn compile_mask(trajectory: &Trajectory) -> Result<LossMask, MaskError> {
    compile_mask_with(trajectory, &GrammarLimits::default())
}

pub fn compile_mask_with(trajectory: &Trajectory, limits: &GrammarLimits) -> Result<LossMask, MaskError> {
    if trajectory.mode == Mode::Filtered {
        return Err(MaskError::Filtered(trajectory.id.clone()));
    }
    let report = validate_structure_with(trajectory, limits);
    if !report.valid {
        return Err(MaskError::Invalid { id: trajectory.id.clone(), violations: report.violations });
    }
    // A valid non-filtered trajectory always has at least one generation.
    let images = count_images(trajectory).map_err(|e| MaskError::Invalid {
        id: trajectory.id.clone(),
        violations: vec![e.to_string()],
    })?;

    let entries = trajectory
        .segments
        .iter()
        .map(|seg| {
            let (kind, index) = (seg.kind(), seg.index);
            let loss = match trajectory.mode {
                Mode::Direct => true,
                Mode::Reflection => {
                    let k = images;
                    matches!((kind, index), (SegmentKind::Evaluation | SegmentKind::Reflection, i) if i == k - 1)
                        || matches!((kind, index), (SegmentKind::Generation | SegmentKind::Evaluation, i) if i == k)
                }
                Mode::MultiStep => !(kind == SegmentKind::Generation && index == 1),
                Mode::Filtered => false,
            };
            MaskEntry { kind, index, loss }
        })
        .collect();

    Ok(LossMask { trajectory_id: trajectory.id.clone(), mode: trajectory.mode, entries })
}

/// Copies the mask bits onto the trajectory's `loss_eligible` flags.
pub fn apply_mask(trajectory: &mut Trajectory) -> Result<(), MaskError> {
    let mask = compile_mask(trajectory)?;
    for (seg, entry) in trajectory.segments.iter_mut().zip(&mask.entries) {
        seg.loss_eligible = entry.loss;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub generation: usize,
    pub evaluation: usize,
    pub reflection: usize,
    pub sub_instruction: usize,
}

impl KindCounts {
    fn add(&mut self, kind: SegmentKind) {
        match kind {
            SegmentKind::Generation => self.generation += 1,
            SegmentKind::Evaluation => self.evaluation += 1,
            SegmentKind::Reflection => self.reflection += 1,
            SegmentKind::SubInstruction => self.sub_instruction += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.generation + self.evaluation + self.reflection + self.sub_instruction
    }
}

/// Loss-true segment counts by kind, per mode and overall.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    pub masks: usize,
    pub per_mode: BTreeMap<Mode, KindCounts>,
    pub total: KindCounts,
}

pub fn mask_stats(masks: &[LossMask]) -> MaskStats {
    let mut stats = MaskStats { masks: masks.len(), ..Default::default() };
    for mask in masks {
        let per_mode = stats.per_mode.entry(mask.mode).or_default();
        for (kind, _) in mask.loss_set() {
            per_mode.add(kind);
            stats.total.add(kind);
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{direct, multistep, reflection, with_mode};
    use SegmentKind::{Evaluation as E, Generation as G, Reflection as R, SubInstruction as S};

    fn loss(mask: &LossMask) -> Vec<(SegmentKind, u32)> {
        mask.loss_set().collect()
    }

    #[test]
    fn direct_mask() {
        assert_eq!(loss(&compile_mask(&direct()).unwrap()), [(G, 1), (E, 1)]);
    }

    #[test]
    fn reflection_k3_mask() {
        let m = compile_mask(&reflection(3)).unwrap();
        assert_eq!(loss(&m), [(E, 2), (R, 2), (G, 3), (E, 3)]);
        let off: Vec<_> = m.entries.iter().filter(|e| !e.loss).map(|e| (e.kind, e.index)).collect();
        assert_eq!(off, [(G, 1), (E, 1), (R, 1), (G, 2)]);
    }

    #[test]
    fn multistep_n2_mask() {
        let m = compile_mask(&multistep(2)).unwrap();
        assert_eq!(loss(&m), [(E, 1), (S, 2), (G, 2), (E, 2), (S, 3), (G, 3), (E, 3)]);
        assert_eq!(m.entries[0], MaskEntry { kind: G, index: 1, loss: false });
    }

    #[test]
    fn filtered_and_invalid_are_rejected() {
        let mut f = with_mode(reflection(4), Mode::Filtered);
        f.failure_cause = Some(crate::FailureCause::Other);
        assert!(matches!(compile_mask(&f), Err(MaskError::Filtered(_))));
        assert!(matches!(compile_mask(&with_mode(direct(), Mode::Reflection)), Err(MaskError::Invalid { .. })));
    }

    #[test]
    fn stats_examples() {
        let s = mask_stats(&[compile_mask(&direct()).unwrap()]);
        assert_eq!(s.total, KindCounts { generation: 1, evaluation: 1, ..Default::default() });

        let s = mask_stats(&[compile_mask(&reflection(2)).unwrap()]);
        assert_eq!(s.total, KindCounts { generation: 1, evaluation: 2, reflection: 1, sub_instruction: 0 });

        assert_eq!(mask_stats(&[]), MaskStats::default());
    }

    #[test]
    fn apply_sets_flags() {
        let mut t = reflection(2);
        apply_mask(&mut t).unwrap();
        let flags: Vec<bool> = t.segments.iter().map(|s| s.loss_eligible).collect();
        assert_eq!(flags, [false, true, true, true, true]);
    }

    #[test]
    fn per_mode_invariants() {
        for k in 2..=4 {
            let c = mask_stats(&[compile_mask(&reflection(k)).unwrap()]).total;
            assert_eq!((c.generation, c.reflection, c.evaluation), (1, 1, 2), "K={k}");
        }
        for n in 1..=8 {
            let c = mask_stats(&[compile_mask(&multistep(n)).unwrap()]).total;
            assert_eq!((c.generation, c.sub_instruction, c.evaluation), (n as usize, n as usize, n as usize + 1));
        }
    }

    #[test]
    fn loss_generations_are_followed_by_passing_evaluations() {
        for t in [direct(), reflection(2), reflection(4), multistep(1), multistep(5)] {
            let m = compile_mask(&t).unwrap();
            for (pos, e) in m.entries.iter().enumerate() {
                if e.kind == G && e.loss {
                    let next = t.segments[pos + 1].as_evaluation().expect("evaluation follows generation");
                    assert!(next.pass, "{} at {pos}", t.shape());
                }
            }
        }
    }
}
