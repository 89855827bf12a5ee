//! Construction, scoring, and bookkeeping for interleaved image-reasoning
//! trajectories.
//!
//! The engine drives an Analyzer/Generator pair through an escalation
//! ladder (direct attempt, bounded reflection, diagnosis, step-wise
//! decomposition), compiles per-mode SFT loss masks, scores rollout groups
//! with the composite reward and complexity penalty, and keeps the
//! human-verification ledger.

pub mod clock;
pub mod config;
pub mod fixtures;
pub mod gateway;
pub mod grammar;
pub mod image_store;
pub mod mask;
pub mod pipeline;
pub mod reward;
pub mod store;
pub mod trajectory;
pub mod verification;

pub use grammar::{count_images, validate_structure, validate_structure_with, GrammarLimits, ValidityReport};
pub use mask::{compile_mask, mask_stats, LossMask, MaskEntry, MaskStats};
pub use pipeline::{prune_multistep, BatchStats, Engine, PipelineConfig, SampleInput};
pub use reward::{
    apply_complexity_penalty, format_reward, group_advantages, outcome_reward, score_group,
    stepwise_reward, total_reward, RewardBreakdown, RewardWeights, RolloutRecord,
};
pub use trajectory::{
    ContentHash, CriterionScores, EvaluationResult, FailureCause, ImageRef, InstructionText, Mode,
    Payload, Provenance, ReflectionText, Score, Segment, SegmentKind, Trajectory,
};
pub use verification::{Decision, VerificationRecord, VerificationStatus, Verdict};
