//! Builders for well-formed trajectories of each mode, used by tests,
//! benchmarks and the Python bindings.

use chrono::DateTime;
use serde_json::Map;

use crate::trajectory::{
    ContentHash, CriterionScores, EvaluationResult, ImageRef, InstructionText, Mode, Provenance,
    ReflectionText, Segment, Trajectory,
};

pub fn image(tag: &str) -> ImageRef {
    ImageRef { uri: format!("mock://{tag}"), content_hash: ContentHash::of(tag.as_bytes()) }
}

pub fn passing() -> EvaluationResult {
    EvaluationResult::judged(CriterionScores::uniform(5).expect("in range"), 4, "all criteria met", None)
}

pub fn failing() -> EvaluationResult {
    EvaluationResult::judged(CriterionScores::new(2, 5, 4, 5).expect("in range"), 4, "instruction not followed", None)
}

pub fn reflection_text(i: u32) -> ReflectionText {
    ReflectionText {
        failure_analysis: format!("attempt {i} missed the requested edit"),
        improvement_plan: format!("attempt {} should apply the edit to the subject", i + 1),
    }
}

fn base(mode: Mode, segments: Vec<Segment>) -> Trajectory {
    Trajectory {
        id: format!("{}-{}", mode, segments.len()),
        mode,
        instruction: "replace the cup with a red teapot".into(),
        references: vec![image("reference")],
        segments,
        category: None,
        provenance: Provenance {
            analyzer: "fixture".into(),
            generator: "fixture".into(),
            created_at: DateTime::from_timestamp(0, 0).expect("epoch"),
            extra: Map::new(),
        },
        verification: None,
        failure_cause: None,
        extra: Map::new(),
    }
}

pub fn direct() -> Trajectory {
    base(Mode::Direct, vec![Segment::generation(1, image("g1")), Segment::evaluation(1, passing())])
}

/// Reflection trajectory with `k` generations; only the last evaluation passes.
pub fn reflection(k: u32) -> Trajectory {
    let mut segments = Vec::new();
    for i in 1..k {
        segments.push(Segment::generation(i, image(&format!("g{i}"))));
        segments.push(Segment::evaluation(i, failing()));
        segments.push(Segment::reflection(i, reflection_text(i)));
    }
    segments.push(Segment::generation(k, image(&format!("g{k}"))));
    segments.push(Segment::evaluation(k, passing()));
    base(Mode::Reflection, segments)
}

/// Pruned multi-step trajectory with `n` sub-steps.
pub fn multistep(n: u32) -> Trajectory {
    let mut segments = vec![Segment::generation(1, image("g1")), Segment::evaluation(1, failing())];
    for i in 2..=n + 1 {
        segments.push(Segment::sub_instruction(i, InstructionText::new(format!("step {}", i - 1))));
        segments.push(Segment::generation(i, image(&format!("s{i}"))));
        segments.push(Segment::evaluation(i, passing()));
    }
    base(Mode::MultiStep, segments)
}

pub fn with_mode(mut t: Trajectory, mode: Mode) -> Trajectory {
    t.mode = mode;
    t
}
