//! Parsers for Analyzer replies.
//!
//! Every reply must embed one JSON object; surrounding prose is tolerated and
//! free-text grading is rejected.

use serde_json::{Map, Value};

use super::GatewayError;
use crate::trajectory::{CriterionScores, EvaluationResult, FailureCause, InstructionText, ReflectionText, Score};

fn malformed(msg: impl Into<String>) -> GatewayError {
    GatewayError::MalformedResponse(msg.into())
}

/// Locates the outermost JSON object in `text`.
///
/// Candidates are tried left to right from each `{`; the first balanced span
/// that parses as an object wins.
pub fn find_json_object(text: &str) -> Option<Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        if let Some(close) = matching_brace(bytes, open) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[open..=close]) {
                return Some(map);
            }
        }
        start = open + 1;
    }
    None
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn object(raw: &str) -> Result<Map<String, Value>, GatewayError> {
    find_json_object(raw).ok_or_else(|| malformed("no JSON object in reply"))
}

fn score(scores: &Map<String, Value>, key: &str) -> Result<Score, GatewayError> {
    let value = scores.get(key).ok_or_else(|| malformed(format!("missing score {key:?}")))?;
    let n = match value {
        Value::Number(n) if n.is_i64() || n.is_u64() => n.as_i64().unwrap_or(i64::MAX),
        other => return Err(malformed(format!("score {key:?} is not an integer: {other}"))),
    };
    Score::new(n).map_err(|_| malformed(format!("score {key:?} = {n} outside 1..=5")))
}

pub fn parse_cause_name(name: &str) -> FailureCause {
    match name.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
        "prompt_complexity" => FailureCause::PromptComplexity,
        "knowledge_gap" => FailureCause::KnowledgeGap,
        _ => FailureCause::Other,
    }
}

/// Parses an evaluation reply. Scores may sit at the top level or under a
/// `scores` key; `pass` is recomputed from `pass_threshold`, never trusted.
pub fn parse_evaluation(raw: &str, pass_threshold: u8) -> Result<EvaluationResult, GatewayError> {
    let obj = object(raw)?;
    let scores_obj = match obj.get("scores") {
        Some(Value::Object(inner)) => inner,
        Some(_) => return Err(malformed("\"scores\" is not an object")),
        None => &obj,
    };
    let scores = CriterionScores {
        instruction: score(scores_obj, "instruction")?,
        consistency: score(scores_obj, "consistency")?,
        quality: score(scores_obj, "quality")?,
        knowledge: score(scores_obj, "knowledge")?,
    };
    let rationale = match obj.get("rationale") {
        Some(Value::String(s)) => s.clone(),
        None | Some(Value::Null) => String::new(),
        Some(other) => other.to_string(),
    };
    let cause = match obj.get("failure_cause").or_else(|| obj.get("cause")) {
        Some(Value::String(s)) => Some(parse_cause_name(s)),
        _ => None,
    };
    Ok(EvaluationResult::judged(scores, pass_threshold, rationale, cause))
}

fn required_text(obj: &Map<String, Value>, key: &str) -> Result<String, GatewayError> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        _ => Err(malformed(format!("missing or empty {key:?}"))),
    }
}

pub fn parse_reflection(raw: &str) -> Result<ReflectionText, GatewayError> {
    let obj = object(raw)?;
    Ok(ReflectionText {
        failure_analysis: required_text(&obj, "failure_analysis")?,
        improvement_plan: required_text(&obj, "improvement_plan")?,
    })
}

/// `{"cause": "prompt_complexity" | "knowledge_gap" | "other"}`; any other
/// string maps to `Other`.
pub fn parse_diagnosis(raw: &str) -> Result<FailureCause, GatewayError> {
    let obj = object(raw)?;
    match obj.get("cause") {
        Some(Value::String(s)) => Ok(parse_cause_name(s)),
        _ => Err(malformed("missing \"cause\"")),
    }
}

/// `{"steps": ["...", ...]}`, items may also be `{"instruction": "..."}`.
/// The step count limit is enforced by the engine, not here.
pub fn parse_plan(raw: &str) -> Result<Vec<InstructionText>, GatewayError> {
    let obj = object(raw)?;
    let steps = match obj.get("steps") {
        Some(Value::Array(items)) => items,
        _ => return Err(malformed("missing \"steps\" array")),
    };
    let mut out = Vec::with_capacity(steps.len());
    for item in steps {
        let text = match item {
            Value::String(s) => s.clone(),
            Value::Object(o) => required_text(o, "instruction")?,
            other => return Err(malformed(format!("plan step is not text: {other}"))),
        };
        if text.trim().is_empty() {
            return Err(malformed("empty plan step"));
        }
        out.push(InstructionText::new(text));
    }
    if out.is_empty() {
        return Err(malformed("plan has no steps"));
    }
    Ok(out)
}

/// `{"validity": x}` (or `"score"`), clamped to [0, 1].
pub fn parse_validity(raw: &str) -> Result<f64, GatewayError> {
    let obj = object(raw)?;
    let v = obj
        .get("validity")
        .or_else(|| obj.get("score"))
        .and_then(Value::as_f64)
        .ok_or_else(|| malformed("missing numeric \"validity\""))?;
    Ok(v.clamp(0.0, 1.0))
}
