//! Structural grammar of trajectories per mode.
//!
//! Direct:     G1 E1
//! Reflection: (G_i E_i R_i) for i < K, then G_K E_K, with 2 <= K <= max
//! MultiStep:  G1 E1, then (S_i G_i E_i) for i = 2..=N+1, N >= 1, no reflections
//! Filtered:   any monotone sequence, but must carry a failure cause

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Mode, Payload, SegmentKind, Trajectory};

use SegmentKind::{Evaluation as E, Generation as G, Reflection as R, SubInstruction as S};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarLimits {
    /// Upper bound on K, the number of generations in a reflection trajectory.
    pub max_reflection_generations: u32,
    /// Upper bound on N, the number of planned sub-steps.
    pub max_plan_steps: u32,
}

impl Default for GrammarLimits {
    fn default() -> Self {
        Self { max_reflection_generations: 4, max_plan_steps: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("trajectory {0} has no generation segments")]
    NoGenerations(String),
}

pub fn validate_structure(trajectory: &Trajectory) -> ValidityReport {
    validate_structure_with(trajectory, &GrammarLimits::default())
}

pub fn validate_structure_with(trajectory: &Trajectory, limits: &GrammarLimits) -> ValidityReport {
    let mut violations = Vec::new();
    check_segments(trajectory, &mut violations);

    match trajectory.mode {
        Mode::Filtered => {
            if trajectory.failure_cause.is_none() {
                violations.push("Filtered trajectory without failure cause".to_owned());
            }
        }
        mode => {
            if let Some(cause) = trajectory.failure_cause {
                violations.push(format!("failure cause {cause} on {mode} trajectory"));
            }
            if let Some(expected) = expected_sequence(trajectory, limits, &mut violations) {
                compare(trajectory, &expected, &mut violations);
            }
        }
    }

    ValidityReport { valid: violations.is_empty(), violations }
}

/// Checks that hold in every mode: positive indices, per-kind monotone
/// indices, and payload sanity.
fn check_segments(trajectory: &Trajectory, violations: &mut Vec<String>) {
    let mut last: HashMap<SegmentKind, u32> = HashMap::new();
    for (pos, seg) in trajectory.segments.iter().enumerate() {
        if seg.index == 0 {
            violations.push(format!("position {pos}: index must be >= 1"));
        }
        if let Some(prev) = last.insert(seg.kind(), seg.index) {
            if seg.index <= prev {
                violations.push(format!(
                    "position {pos}: {} follows {}{prev}; indices of one kind must increase",
                    seg.label(),
                    seg.kind().letter()
                ));
            }
        }
        match &seg.payload {
            Payload::Reflection(r) if !r.is_complete() => {
                violations.push(format!("position {pos}: {} has an empty analysis or plan", seg.label()));
            }
            Payload::Evaluation(e) if e.pass && e.failure_cause.is_some() => {
                violations.push(format!("position {pos}: {} passes but carries a failure cause", seg.label()));
            }
            _ => {}
        }
    }
}

fn expected_sequence(
    trajectory: &Trajectory,
    limits: &GrammarLimits,
    violations: &mut Vec<String>,
) -> Option<Vec<(SegmentKind, u32)>> {
    let generations = trajectory.segments_of(G).count() as u32;
    let has = |kind| trajectory.segments_of(kind).next().is_some();
    match trajectory.mode {
        Mode::Direct => Some(vec![(G, 1), (E, 1)]),
        Mode::Reflection => {
            if has(S) {
                violations.push("SubInstruction segment in Reflection".to_owned());
            }
            let k = generations;
            if k < 2 {
                violations.push(format!("Reflection needs at least 2 generations, found {k}"));
                return (k == 1).then(|| reflection_sequence(2));
            }
            if k > limits.max_reflection_generations {
                violations.push(format!(
                    "Reflection has {k} generations, limit is {}",
                    limits.max_reflection_generations
                ));
            }
            Some(reflection_sequence(k))
        }
        Mode::MultiStep => {
            if has(R) {
                violations.push("Reflection segment in MultiStep".to_owned());
            }
            let n = generations.saturating_sub(1);
            if n < 1 {
                violations.push(format!("MultiStep needs at least 1 sub-step, found {n}"));
                return Some(multistep_sequence(1));
            }
            if n > limits.max_plan_steps {
                violations.push(format!("MultiStep has {n} sub-steps, limit is {}", limits.max_plan_steps));
            }
            Some(multistep_sequence(n))
        }
        Mode::Filtered => None,
    }
}

pub(crate) fn reflection_sequence(k: u32) -> Vec<(SegmentKind, u32)> {
    let mut seq: Vec<_> = (1..k).flat_map(|i| [(G, i), (E, i), (R, i)]).collect();
    seq.extend([(G, k), (E, k)]);
    seq
}

pub(crate) fn multistep_sequence(n: u32) -> Vec<(SegmentKind, u32)> {
    let mut seq = vec![(G, 1), (E, 1)];
    seq.extend((2..=n + 1).flat_map(|i| [(S, i), (G, i), (E, i)]));
    seq
}

fn compare(trajectory: &Trajectory, expected: &[(SegmentKind, u32)], violations: &mut Vec<String>) {
    let actual: Vec<(SegmentKind, u32)> = trajectory.segments.iter().map(|s| (s.kind(), s.index)).collect();
    if actual.len() != expected.len() {
        violations.push(format!(
            "{} expects {} segments, found {}",
            trajectory.mode,
            expected.len(),
            actual.len()
        ));
    }
    let label = |(k, i): (SegmentKind, u32)| format!("{}{i}", k.letter());
    for pos in 0..actual.len().max(expected.len()) {
        match (actual.get(pos), expected.get(pos)) {
            (Some(a), Some(e)) if a != e => {
                violations.push(format!("position {pos}: expected {}, found {}", label(*e), label(*a)))
            }
            (Some(a), None) => violations.push(format!("position {pos}: unexpected {}", label(*a))),
            (None, Some(e)) => violations.push(format!("position {pos}: missing {}", label(*e))),
            _ => {}
        }
    }
}

/// Number of generated images (N_img) in the trajectory.
pub fn count_images(trajectory: &Trajectory) -> Result<u32, GrammarError> {
    match trajectory.segments_of(G).count() {
        0 => Err(GrammarError::NoGenerations(trajectory.id.clone())),
        n => Ok(n as u32),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{direct, multistep, reflection, with_mode};

    #[test]
    fn direct_is_valid() {
        let r = validate_structure(&direct());
        assert!(r.valid, "{:?}", r.violations);
    }

    #[test]
    fn smallest_reflection_is_valid() {
        let t = reflection(2);
        assert_eq!(t.shape(), "G1 E1 R1 G2 E2");
        assert!(validate_structure(&t).valid);
    }

    #[test]
    fn reflection_inside_multistep_is_flagged() {
        let mut t = multistep(1);
        let r1 = reflection(2).segments[2].clone();
        let r2 = crate::trajectory::Segment { index: 2, ..r1 };
        t.segments.push(r2);
        assert_eq!(t.shape(), "G1 E1 S2 G2 E2 R2");
        let r = validate_structure(&t);
        assert!(!r.valid);
        assert!(r.violations.iter().any(|v| v == "Reflection segment in MultiStep"), "{:?}", r.violations);
    }

    #[test]
    fn reflection_without_final_evaluation_is_invalid() {
        let mut t = reflection(3);
        t.segments.pop();
        assert!(!validate_structure(&t).valid);
    }

    #[test]
    fn direct_mode_with_reflection_shape_is_invalid() {
        let t = with_mode(reflection(2), Mode::Direct);
        assert!(!validate_structure(&t).valid);
    }

    #[test]
    fn filtered_requires_cause() {
        let mut t = with_mode(reflection(4), Mode::Filtered);
        assert!(!validate_structure(&t).valid);
        t.failure_cause = Some(crate::trajectory::FailureCause::KnowledgeGap);
        assert!(validate_structure(&t).valid);
    }

    #[test]
    fn limits_apply() {
        assert!(!validate_structure(&reflection(5)).valid);
        let wide = GrammarLimits { max_reflection_generations: 6, ..Default::default() };
        assert!(validate_structure_with(&reflection(5), &wide).valid);
        assert!(!validate_structure(&multistep(9)).valid);
    }

    #[test]
    fn image_counts() {
        assert_eq!(count_images(&direct()), Ok(1));
        assert_eq!(count_images(&reflection(3)), Ok(3));
        assert_eq!(count_images(&multistep(3)), Ok(4));
        let mut empty = direct();
        empty.segments.clear();
        assert!(count_images(&empty).is_err());
    }

    #[test]
    fn empty_segments_never_panic() {
        for mode in Mode::ALL {
            let mut t = with_mode(direct(), mode);
            t.segments.clear();
            assert!(!validate_structure(&t).valid || mode == Mode::Filtered);
        }
    }
}
