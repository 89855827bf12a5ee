//! Trajectory data model and its JSONL wire form.
//!
//! A trajectory is the interleaved record of one sample: generations (G),
//! evaluations (E), reflections (R) and sub-instructions (S), each carrying
//! the subscript it has in the sample definition. Segment kind is derived
//! from the payload, so a kind/payload mismatch cannot be constructed.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::verification::VerificationRecord;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("score {0} outside 1..=5")]
    ScoreOutOfRange(i64),
    #[error("invalid content hash {0:?}: expected 64 lowercase hex characters")]
    InvalidHash(String),
    #[error("segment index must be >= 1")]
    ZeroIndex,
    #[error("payload for {kind} segment does not parse: {message}")]
    Payload { kind: SegmentKind, message: String },
}

/// One criterion score on the 1-5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Score(u8);

impl Score {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 5;

    pub fn new(value: i64) -> Result<Self, TrajectoryError> {
        if (Self::MIN as i64..=Self::MAX as i64).contains(&value) {
            Ok(Score(value as u8))
        } else {
            Err(TrajectoryError::ScoreOutOfRange(value))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Score {
    type Error = TrajectoryError;
    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Score::new(value)
    }
}

impl From<Score> for i64 {
    fn from(s: Score) -> i64 {
        s.0 as i64
    }
}

/// Scores for the four evaluation criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionScores {
    pub instruction: Score,
    pub consistency: Score,
    pub quality: Score,
    pub knowledge: Score,
}

impl CriterionScores {
    pub fn new(instruction: i64, consistency: i64, quality: i64, knowledge: i64) -> Result<Self, TrajectoryError> {
        Ok(Self {
            instruction: Score::new(instruction)?,
            consistency: Score::new(consistency)?,
            quality: Score::new(quality)?,
            knowledge: Score::new(knowledge)?,
        })
    }

    pub fn uniform(value: i64) -> Result<Self, TrajectoryError> {
        Self::new(value, value, value, value)
    }

    pub fn as_array(&self) -> [u8; 4] {
        [self.instruction.0, self.consistency.0, self.quality.0, self.knowledge.0]
    }

    pub fn min(&self) -> u8 {
        self.as_array().into_iter().min().unwrap_or(Score::MIN)
    }

    pub fn meets(&self, threshold: u8) -> bool {
        self.min() >= threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    PromptComplexity,
    KnowledgeGap,
    Other,
}

impl FailureCause {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureCause::PromptComplexity => "prompt_complexity",
            FailureCause::KnowledgeGap => "knowledge_gap",
            FailureCause::Other => "other",
        }
    }
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub scores: CriterionScores,
    pub pass: bool,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub failure_cause: Option<FailureCause>,
}

impl EvaluationResult {
    /// Builds a result whose verdict follows the all-criteria rule at `pass_threshold`.
    /// A failure cause is only kept on failing verdicts.
    pub fn judged(
        scores: CriterionScores,
        pass_threshold: u8,
        rationale: impl Into<String>,
        failure_cause: Option<FailureCause>,
    ) -> Self {
        let pass = scores.meets(pass_threshold);
        Self {
            scores,
            pass,
            rationale: rationale.into(),
            failure_cause: if pass { None } else { failure_cause },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionText {
    pub failure_analysis: String,
    pub improvement_plan: String,
}

impl ReflectionText {
    pub fn is_complete(&self) -> bool {
        !self.failure_analysis.trim().is_empty() && !self.improvement_plan.trim().is_empty()
    }

    /// Text handed to the generator when revising.
    pub fn as_prompt(&self) -> String {
        format!("{}\n{}", self.failure_analysis, self.improvement_plan)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionText {
    pub text: String,
}

impl InstructionText {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

/// SHA-256 digest of image bytes, lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContentHash(String);

impl ContentHash {
    pub fn parse(s: &str) -> Result<Self, TrajectoryError> {
        if s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            Ok(ContentHash(s.to_owned()))
        } else {
            Err(TrajectoryError::InvalidHash(s.to_owned()))
        }
    }

    pub fn of(bytes: &[u8]) -> Self {
        use sha2::{Digest, Sha256};
        ContentHash(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ContentHash {
    type Error = TrajectoryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        ContentHash::parse(&s)
    }
}

impl From<ContentHash> for String {
    fn from(h: ContentHash) -> String {
        h.0
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    pub content_hash: ContentHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashCheck {
    Match,
    Mismatch,
    /// The uri does not name a readable local file.
    Unresolvable,
}

impl ImageRef {
    /// Compares the referenced bytes against the recorded hash when the uri
    /// points at a readable local file (plain path or `file://`).
    pub fn verify(&self) -> HashCheck {
        let path = self.uri.strip_prefix("file://").unwrap_or(&self.uri);
        if path.contains("://") {
            return HashCheck::Unresolvable;
        }
        match std::fs::read(path) {
            Ok(bytes) if ContentHash::of(&bytes) == self.content_hash => HashCheck::Match,
            Ok(_) => HashCheck::Mismatch,
            Err(_) => HashCheck::Unresolvable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Generation,
    Evaluation,
    Reflection,
    SubInstruction,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::Generation,
        SegmentKind::Evaluation,
        SegmentKind::Reflection,
        SegmentKind::SubInstruction,
    ];

    pub fn letter(self) -> char {
        match self {
            SegmentKind::Generation => 'G',
            SegmentKind::Evaluation => 'E',
            SegmentKind::Reflection => 'R',
            SegmentKind::SubInstruction => 'S',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::Generation => "Generation",
            SegmentKind::Evaluation => "Evaluation",
            SegmentKind::Reflection => "Reflection",
            SegmentKind::SubInstruction => "SubInstruction",
        }
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Image(ImageRef),
    Evaluation(EvaluationResult),
    Reflection(ReflectionText),
    Instruction(InstructionText),
}

impl Payload {
    pub fn kind(&self) -> SegmentKind {
        match self {
            Payload::Image(_) => SegmentKind::Generation,
            Payload::Evaluation(_) => SegmentKind::Evaluation,
            Payload::Reflection(_) => SegmentKind::Reflection,
            Payload::Instruction(_) => SegmentKind::SubInstruction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSegment", into = "RawSegment")]
pub struct Segment {
    pub index: u32,
    pub payload: Payload,
    pub loss_eligible: bool,
    /// Fields this version does not know about, kept for round-tripping.
    pub extra: Map<String, Value>,
}

impl Segment {
    pub fn new(index: u32, payload: Payload) -> Self {
        Self { index, payload, loss_eligible: false, extra: Map::new() }
    }

    pub fn generation(index: u32, image: ImageRef) -> Self {
        Self::new(index, Payload::Image(image))
    }

    pub fn evaluation(index: u32, result: EvaluationResult) -> Self {
        Self::new(index, Payload::Evaluation(result))
    }

    pub fn reflection(index: u32, text: ReflectionText) -> Self {
        Self::new(index, Payload::Reflection(text))
    }

    pub fn sub_instruction(index: u32, text: InstructionText) -> Self {
        Self::new(index, Payload::Instruction(text))
    }

    pub fn kind(&self) -> SegmentKind {
        self.payload.kind()
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.kind().letter(), self.index)
    }

    pub fn as_evaluation(&self) -> Option<&EvaluationResult> {
        match &self.payload {
            Payload::Evaluation(e) => Some(e),
            _ => None,
        }
    }

    pub fn as_image(&self) -> Option<&ImageRef> {
        match &self.payload {
            Payload::Image(i) => Some(i),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    kind: SegmentKind,
    index: u32,
    payload: Value,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    loss_eligible: bool,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

impl TryFrom<RawSegment> for Segment {
    type Error = TrajectoryError;

    fn try_from(raw: RawSegment) -> Result<Self, Self::Error> {
        if raw.index == 0 {
            return Err(TrajectoryError::ZeroIndex);
        }
        let kind = raw.kind;
        let wrap = |e: serde_json::Error| TrajectoryError::Payload { kind, message: e.to_string() };
        let payload = match kind {
            SegmentKind::Generation => Payload::Image(serde_json::from_value(raw.payload).map_err(wrap)?),
            SegmentKind::Evaluation => Payload::Evaluation(serde_json::from_value(raw.payload).map_err(wrap)?),
            SegmentKind::Reflection => Payload::Reflection(serde_json::from_value(raw.payload).map_err(wrap)?),
            SegmentKind::SubInstruction => {
                Payload::Instruction(serde_json::from_value(raw.payload).map_err(wrap)?)
            }
        };
        Ok(Segment { index: raw.index, payload, loss_eligible: raw.loss_eligible, extra: raw.extra })
    }
}

impl From<Segment> for RawSegment {
    fn from(s: Segment) -> Self {
        let kind = s.kind();
        // Payload types serialize infallibly (plain strings, ints and bools).
        let payload = match s.payload {
            Payload::Image(p) => serde_json::to_value(p),
            Payload::Evaluation(p) => serde_json::to_value(p),
            Payload::Reflection(p) => serde_json::to_value(p),
            Payload::Instruction(p) => serde_json::to_value(p),
        }
        .unwrap_or(Value::Null);
        RawSegment { kind, index: s.index, payload, loss_eligible: s.loss_eligible, extra: s.extra }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Direct,
    Reflection,
    MultiStep,
    Filtered,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Direct, Mode::Reflection, Mode::MultiStep, Mode::Filtered];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Reflection => "reflection",
            Mode::MultiStep => "multi_step",
            Mode::Filtered => "filtered",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub analyzer: String,
    pub generator: String,
    pub created_at: DateTime<Utc>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub mode: Mode,
    pub instruction: String,
    #[serde(default)]
    pub references: Vec<ImageRef>,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub category: Option<String>,
    pub provenance: Provenance,
    #[serde(default)]
    pub verification: Option<VerificationRecord>,
    /// Set on filtered trajectories only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_cause: Option<FailureCause>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Trajectory {
    pub fn segments_of(&self, kind: SegmentKind) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.kind() == kind)
    }

    pub fn evaluations(&self) -> impl Iterator<Item = &EvaluationResult> {
        self.segments.iter().filter_map(Segment::as_evaluation)
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.segments.iter().filter_map(Segment::as_image)
    }

    /// The last evaluation in the trajectory, which judges the final output.
    pub fn final_evaluation(&self) -> Option<&EvaluationResult> {
        self.segments.iter().rev().find_map(Segment::as_evaluation)
    }

    /// Compact sequence such as `G1 E1 R1 G2 E2`.
    pub fn shape(&self) -> String {
        self.segments.iter().map(Segment::label).collect::<Vec<_>>().join(" ")
    }

    pub fn to_json_line(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json_line(line: &str) -> serde_json::Result<Self> {
        serde_json::from_str(line)
    }
}
