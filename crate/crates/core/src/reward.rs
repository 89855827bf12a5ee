//! Composite rollout reward, intra-group complexity penalty, and
//! group-relative advantages.
//!
//! For rollout i in a group:
//!
//! ```text
//! R_o     = 0.05 * (S_instr + S_cons + S_qual + S_know)          in [0.2, 1.0]
//! R_f     = 1 if the trajectory grammar holds, else 0
//! R_s     = mean Analyzer validity over the T reasoning texts    (1.0 when T = 0)
//! R_total = a1 R_o + a2 R_f + a3 R_s
//! R_final = R_total + N*/N_i   if R_total >= max_j R_total_j - eps
//!         = R_total            otherwise
//! A_i     = (R_final_i - mean) / (std + 1e-6), population std; 0 for constant groups
//! ```
//!
//! N_i is the rollout's image count and N* the smallest image count among
//! competitive rollouts.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::gateway::TextRole;
use crate::grammar::{count_images, validate_structure_with, GrammarLimits};
use crate::trajectory::{CriterionScores, EvaluationResult, Payload, Trajectory};

/// Per-criterion outcome weight: each 1-5 score is scaled by 0.2 and the four
/// are averaged, so every criterion carries 0.2 / 4.
pub const OUTCOME_CRITERION_WEIGHT: f64 = 0.05;

/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_STABILIZER: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("empty rollout group")]
    EmptyGroup,
    #[error("rollout {index}: image count must be >= 1")]
    NoImages { index: usize },
    #[error("validity {0} outside [0, 1]")]
    ValidityOutOfRange(f64),
    #[error("epsilon must be finite and non-negative, got {0}")]
    BadEpsilon(f64),
    #[error("total reward {0} is not finite")]
    NonFinite(f64),
    #[error("rollout {index}: {found} validities for {expected} reasoning texts")]
    StepCountMismatch { index: usize, expected: usize, found: usize },
    #[error("rollout {index}: no final evaluation to score")]
    MissingScores { index: usize },
    #[error("invalid reward weights: {0}")]
    BadWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha_outcome: f64,
    pub alpha_format: f64,
    pub alpha_stepwise: f64,
    pub epsilon: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha_outcome: 0.7, alpha_format: 0.1, alpha_stepwise: 0.2, epsilon: 0.05 }
    }
}

impl RewardWeights {
    /// Rejects negative or non-finite values; a sum other than 1 only warns.
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [
            ("alpha_outcome", self.alpha_outcome),
            ("alpha_format", self.alpha_format),
            ("alpha_stepwise", self.alpha_stepwise),
            ("epsilon", self.epsilon),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(RewardError::BadWeights(format!("{name} = {v}")));
            }
        }
        let sum = self.alpha_outcome + self.alpha_format + self.alpha_stepwise;
        if (sum - 1.0).abs() > 1e-9 {
            warn!(sum, "reward weights do not sum to 1");
        }
        Ok(())
    }
}

pub fn outcome_reward(scores: &CriterionScores) -> f64 {
    let [instr, cons, qual, know] = scores.as_array().map(f64::from);
    OUTCOME_CRITERION_WEIGHT * instr
        + OUTCOME_CRITERION_WEIGHT * cons
        + OUTCOME_CRITERION_WEIGHT * qual
        + OUTCOME_CRITERION_WEIGHT * know
}

pub fn format_reward(trajectory: &Trajectory) -> f64 {
    format_reward_with(trajectory, &GrammarLimits::default())
}

pub fn format_reward_with(trajectory: &Trajectory, limits: &GrammarLimits) -> f64 {
    if validate_structure_with(trajectory, limits).valid {
        1.0
    } else {
        0.0
    }
}

pub fn stepwise_reward(validities: &[f64]) -> Result<f64, RewardError> {
    if let Some(&bad) = validities.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(RewardError::ValidityOutOfRange(bad));
    }
    if validities.is_empty() {
        return Ok(1.0);
    }
    Ok(validities.iter().sum::<f64>() / validities.len() as f64)
}

pub fn total_reward(r_outcome: f64, r_format: f64, r_stepwise: f64, weights: &RewardWeights) -> f64 {
    weights.alpha_outcome * r_outcome + weights.alpha_format * r_format + weights.alpha_stepwise * r_stepwise
}

/// Membership in the competitive set: within `epsilon` of the group maximum.
pub fn competitive_set(totals: &[f64], epsilon: f64) -> Result<Vec<bool>, RewardError> {
    if totals.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(RewardError::BadEpsilon(epsilon));
    }
    if let Some(&bad) = totals.iter().find(|t| !t.is_finite()) {
        return Err(RewardError::NonFinite(bad));
    }
    let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(totals.iter().map(|&t| t >= max - epsilon).collect())
}

/// Final rewards for a group of `(r_total, n_images)` pairs.
pub fn apply_complexity_penalty(group: &[(f64, u32)], epsilon: f64) -> Result<Vec<f64>, RewardError> {
    Ok(penalize(group, epsilon)?.into_iter().map(|(r, _)| r).collect())
}

fn penalize(group: &[(f64, u32)], epsilon: f64) -> Result<Vec<(f64, bool)>, RewardError> {
    if let Some(index) = group.iter().position(|&(_, n)| n == 0) {
        return Err(RewardError::NoImages { index });
    }
    let totals: Vec<f64> = group.iter().map(|&(t, _)| t).collect();
    let competitive = competitive_set(&totals, epsilon)?;
    let fewest = group
        .iter()
        .zip(&competitive)
        .filter(|(_, &c)| c)
        .map(|(&(_, n), _)| n)
        .min()
        .expect("the group maximum is always competitive");
    Ok(group
        .iter()
        .zip(competitive)
        .map(|(&(total, n), c)| if c { (total + fewest as f64 / n as f64, true) } else { (total, false) })
        .collect())
}

/// Group-normalized advantages with population standard deviation.
pub fn group_advantages(finals: &[f64]) -> Vec<f64> {
    let Some(&first) = finals.first() else { return Vec::new() };
    if finals.iter().all(|&r| r == first) {
        return vec![0.0; finals.len()];
    }
    let m = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / m;
    let var = finals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / m;
    let denom = var.sqrt() + ADVANTAGE_STABILIZER;
    finals.iter().map(|r| (r - mean) / denom).collect()
}

/// The intermediate reasoning texts graded for the step-wise reward, in
/// segment order: failing evaluations (failure analyses), reflections, and
/// sub-instructions. Passing evaluations are outputs, not steps.
pub fn reasoning_texts(trajectory: &Trajectory) -> Vec<(TextRole, String)> {
    trajectory
        .segments
        .iter()
        .filter_map(|seg| match &seg.payload {
            Payload::Evaluation(e) if !e.pass => Some((TextRole::FailureAnalysis, e.rationale.clone())),
            Payload::Reflection(r) => Some((TextRole::ReflectionPrompt, r.as_prompt())),
            Payload::Instruction(s) => Some((TextRole::StepDecomposition, s.text.clone())),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub trajectory: Trajectory,
    /// Scores of the final output; defaults to the trajectory's last evaluation.
    #[serde(default)]
    pub final_scores: Option<EvaluationResult>,
    /// One Analyzer validity per reasoning text, see [`reasoning_texts`].
    #[serde(default)]
    pub text_validities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub rollout_index: usize,
    pub r_outcome: f64,
    pub r_format: f64,
    pub r_stepwise: f64,
    pub r_total: f64,
    pub r_final: f64,
    pub n_images: u32,
    pub competitive: bool,
    pub advantage: f64,
}

pub fn score_group(rollouts: &[RolloutRecord], weights: &RewardWeights) -> Result<Vec<RewardBreakdown>, RewardError> {
    score_group_with(rollouts, weights, &GrammarLimits::default())
}

pub fn score_group_with(
    rollouts: &[RolloutRecord],
    weights: &RewardWeights,
    limits: &GrammarLimits,
) -> Result<Vec<RewardBreakdown>, RewardError> {
    if rollouts.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    weights.validate()?;

    let mut partial = Vec::with_capacity(rollouts.len());
    for (index, rollout) in rollouts.iter().enumerate() {
        let t = &rollout.trajectory;
        let expected = reasoning_texts(t).len();
        if rollout.text_validities.len() != expected {
            return Err(RewardError::StepCountMismatch { index, expected, found: rollout.text_validities.len() });
        }
        let scores = rollout
            .final_scores
            .as_ref()
            .or_else(|| t.final_evaluation())
            .ok_or(RewardError::MissingScores { index })?
            .scores;
        let n_images = count_images(t).map_err(|_| RewardError::NoImages { index })?;
        let r_outcome = outcome_reward(&scores);
        let r_format = format_reward_with(t, limits);
        let r_stepwise = stepwise_reward(&rollout.text_validities)?;
        let r_total = total_reward(r_outcome, r_format, r_stepwise, weights);
        partial.push((r_outcome, r_format, r_stepwise, r_total, n_images));
    }

    let group: Vec<(f64, u32)> = partial.iter().map(|p| (p.3, p.4)).collect();
    let finals = penalize(&group, weights.epsilon)?;
    let advantages = group_advantages(&finals.iter().map(|f| f.0).collect::<Vec<_>>());

    Ok(partial
        .into_iter()
        .zip(finals)
        .zip(advantages)
        .enumerate()
        .map(|(rollout_index, (((r_outcome, r_format, r_stepwise, r_total, n_images), (r_final, competitive)), advantage))| {
            RewardBreakdown { rollout_index, r_outcome, r_format, r_stepwise, r_total, r_final, n_images, competitive, advantage }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{direct, multistep, reflection};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn outcome_examples() {
        assert!(close(outcome_reward(&CriterionScores::uniform(5).unwrap()), 1.0, 1e-12));
        assert!(close(outcome_reward(&CriterionScores::uniform(1).unwrap()), 0.2, 1e-12));
        assert!(close(outcome_reward(&CriterionScores::new(3, 4, 5, 2).unwrap()), 0.70, 1e-12));
    }

    #[test]
    fn format_examples() {
        assert_eq!(format_reward(&direct()), 1.0);
        let mut t = multistep(1);
        t.segments.push(reflection(2).segments[2].clone());
        assert_eq!(format_reward(&t), 0.0);
        let mut t = reflection(3);
        t.segments.pop();
        assert_eq!(format_reward(&t), 0.0);
    }

    #[test]
    fn stepwise_examples() {
        assert!(close(stepwise_reward(&[0.8, 1.0]).unwrap(), 0.9, 1e-12));
        assert_eq!(stepwise_reward(&[]).unwrap(), 1.0);
        assert!(close(stepwise_reward(&[0.0, 0.0, 1.0]).unwrap(), 1.0 / 3.0, 1e-12));
        assert_eq!(stepwise_reward(&[1.2]), Err(RewardError::ValidityOutOfRange(1.2)));
        assert!(stepwise_reward(&[f64::NAN]).is_err());
    }

    #[test]
    fn total_examples() {
        let w = RewardWeights::default();
        assert!(close(total_reward(1.0, 1.0, 0.9, &w), 0.98, 1e-12));
        assert!(close(total_reward(0.2, 0.0, 0.0, &w), 0.14, 1e-12));
        assert!(close(total_reward(1.0, 1.0, 1.0, &w), 1.0, 1e-12));
    }

    #[test]
    fn penalty_examples() {
        let f = apply_complexity_penalty(&[(0.95, 3), (0.93, 1), (0.80, 1)], 0.05).unwrap();
        assert!(close(f[0], 0.95 + 1.0 / 3.0, 1e-9));
        assert!(close(f[1], 1.93, 1e-9));
        assert_eq!(f[2], 0.80);

        assert!(close(apply_complexity_penalty(&[(0.9, 2)], 0.05).unwrap()[0], 1.9, 1e-12));

        let f = apply_complexity_penalty(&[(0.5, 3); 4], 0.05).unwrap();
        assert!(f.iter().all(|&r| close(r, 1.5, 1e-12)));

        assert_eq!(apply_complexity_penalty(&[], 0.05), Err(RewardError::EmptyGroup));
        assert_eq!(apply_complexity_penalty(&[(0.5, 0)], 0.05), Err(RewardError::NoImages { index: 0 }));
        assert!(apply_complexity_penalty(&[(0.5, 1)], -0.1).is_err());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.3, 0.3, 0.3]), [0.0; 3]);
        assert_eq!(group_advantages(&[0.1 + 0.2; 5]), [0.0; 5]);
        assert_eq!(group_advantages(&[1.7]), [0.0]);
        assert!(group_advantages(&[]).is_empty());

        let finals = [1.93, 0.95 + 1.0 / 3.0, 0.80];
        let a = group_advantages(&finals);
        assert!(a[0] > 0.0 && a[1] < 0.0 && a[2] < 0.0);
        let mean = finals.iter().sum::<f64>() / 3.0;
        assert!(close(mean, 1.3378, 1e-4));
        let std = (finals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        // A * std reproduces the deviation up to the stabilizer's effect.
        let resid: f64 = finals.iter().zip(&a).map(|(r, a)| (a * (std + ADVANTAGE_STABILIZER) - (r - mean)).abs()).sum();
        assert!(resid < 1e-6);
    }

    #[test]
    fn reasoning_text_selection() {
        assert!(reasoning_texts(&direct()).is_empty());
        let roles: Vec<_> = reasoning_texts(&reflection(3)).into_iter().map(|(r, _)| r).collect();
        use TextRole::*;
        assert_eq!(roles, [FailureAnalysis, ReflectionPrompt, FailureAnalysis, ReflectionPrompt]);
        let roles: Vec<_> = reasoning_texts(&multistep(2)).into_iter().map(|(r, _)| r).collect();
        assert_eq!(roles, [FailureAnalysis, StepDecomposition, StepDecomposition]);
    }

    #[test]
    fn single_direct_group() {
        let r = RolloutRecord { trajectory: direct(), final_scores: None, text_validities: vec![] };
        let b = score_group(&[r], &RewardWeights::default()).unwrap();
        assert!(close(b[0].r_total, 1.0, 1e-12));
        assert!(close(b[0].r_final, 2.0, 1e-12));
        assert_eq!(b[0].advantage, 0.0);
        assert!(b[0].competitive);
    }

    #[test]
    fn identical_group() {
        let r = RolloutRecord { trajectory: reflection(2), final_scores: None, text_validities: vec![0.5, 0.7] };
        let b = score_group(&vec![r; 8], &RewardWeights::default()).unwrap();
        assert!(b.windows(2).all(|w| RewardBreakdown { rollout_index: 0, ..w[0].clone() }
            == RewardBreakdown { rollout_index: 0, ..w[1].clone() }));
        assert!(b.iter().all(|x| x.advantage == 0.0));
    }

    #[test]
    fn invalid_format_loses_exactly_alpha_format() {
        let good = RolloutRecord { trajectory: direct(), final_scores: None, text_validities: vec![] };
        let mut broken = direct();
        broken.segments.push(crate::trajectory::Segment::generation(2, crate::fixtures::image("extra")));
        let mut bad = good.clone();
        bad.trajectory = broken;
        bad.final_scores = Some(crate::fixtures::passing());
        let w = RewardWeights::default();
        let b = score_group(&[good, bad], &w).unwrap();
        assert_eq!(b[1].r_format, 0.0);
        assert!(close(b[0].r_total - b[1].r_total, w.alpha_format, 1e-12));
    }

    #[test]
    fn validity_count_must_match() {
        let r = RolloutRecord { trajectory: reflection(2), final_scores: None, text_validities: vec![1.0] };
        assert_eq!(
            score_group(&[r], &RewardWeights::default()),
            Err(RewardError::StepCountMismatch { index: 0, expected: 2, found: 1 })
        );
    }
}
