//! Python bindings. Trajectories and masks cross the boundary as JSON
//! strings in the same shape the JSONL files use.

use std::sync::Arc;

use forge_core::clock::FixedClock;
use forge_core::gateway::{parse_evaluation as parse_eval, scripted_mock};
use forge_core::{Engine, PipelineConfig, RewardWeights, SampleInput, Trajectory};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn invalid(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn trajectory(json: &str) -> PyResult<Trajectory> {
    serde_json::from_str(json).map_err(invalid)
}

/// Outcome reward for four 1..=5 criterion scores.
#[pyfunction]
fn outcome_reward(instruction: i64, consistency: i64, quality: i64, knowledge: i64) -> PyResult<f64> {
    let scores = forge_core::CriterionScores::new(instruction, consistency, quality, knowledge).map_err(invalid)?;
    Ok(forge_core::outcome_reward(&scores))
}

#[pyfunction]
#[pyo3(signature = (r_outcome, r_format, r_stepwise, alpha_outcome=0.7, alpha_format=0.1, alpha_stepwise=0.2))]
fn total_reward(r_outcome: f64, r_format: f64, r_stepwise: f64, alpha_outcome: f64, alpha_format: f64, alpha_stepwise: f64) -> f64 {
    let w = RewardWeights { alpha_outcome, alpha_format, alpha_stepwise, ..RewardWeights::default() };
    forge_core::total_reward(r_outcome, r_format, r_stepwise, &w)
}

#[pyfunction]
fn stepwise_reward(validities: Vec<f64>) -> PyResult<f64> {
    forge_core::stepwise_reward(&validities).map_err(invalid)
}

/// Finals for `(total, n_images)` pairs.
#[pyfunction]
#[pyo3(signature = (group, epsilon=0.05))]
fn apply_complexity_penalty(group: Vec<(f64, u32)>, epsilon: f64) -> PyResult<Vec<f64>> {
    forge_core::apply_complexity_penalty(&group, epsilon).map_err(invalid)
}

#[pyfunction]
fn group_advantages(finals: Vec<f64>) -> Vec<f64> {
    forge_core::group_advantages(&finals)
}

/// `(valid, violations)` for a trajectory JSON string.
#[pyfunction]
fn validate_structure(trajectory_json: &str) -> PyResult<(bool, Vec<String>)> {
    let report = forge_core::validate_structure(&trajectory(trajectory_json)?);
    Ok((report.valid, report.violations))
}

#[pyfunction]
fn format_reward(trajectory_json: &str) -> PyResult<f64> {
    Ok(forge_core::format_reward(&trajectory(trajectory_json)?))
}

#[pyfunction]
fn count_images(trajectory_json: &str) -> PyResult<u32> {
    forge_core::count_images(&trajectory(trajectory_json)?).map_err(invalid)
}

/// Loss mask as a JSON string.
#[pyfunction]
fn compile_mask(trajectory_json: &str) -> PyResult<String> {
    let mask = forge_core::compile_mask(&trajectory(trajectory_json)?).map_err(invalid)?;
    serde_json::to_string(&mask).map_err(invalid)
}

/// Parses a raw Analyzer evaluation reply into an evaluation JSON string.
#[pyfunction]
#[pyo3(signature = (raw, pass_threshold=4))]
fn parse_evaluation(raw: &str, pass_threshold: u8) -> PyResult<String> {
    let result = parse_eval(raw, pass_threshold).map_err(invalid)?;
    serde_json::to_string(&result).map_err(invalid)
}

/// Runs the scripted offline pipeline over instructions and returns one
/// trajectory JSON string per successful sample, in input order.
#[pyfunction]
#[pyo3(signature = (instructions, seed=0, timestamp=0))]
fn run_mock_pipeline(py: Python<'_>, instructions: Vec<String>, seed: u64, timestamp: i64) -> PyResult<Vec<String>> {
    let created = chrono::DateTime::from_timestamp(timestamp, 0).ok_or_else(|| invalid("timestamp out of range"))?;
    let (analyzer, generator, _) = scripted_mock(seed, None);
    let engine = Engine::new(analyzer, generator, PipelineConfig::default())
        .map_err(invalid)?
        .with_seed(seed)
        .with_clock(Arc::new(FixedClock(created)));
    let inputs: Vec<SampleInput> = instructions.into_iter().map(SampleInput::new).collect();
    let outcome = py.detach(|| engine.run_batch(&inputs, 1));
    outcome.trajectories.iter().map(|t| t.to_json_line().map_err(invalid)).collect()
}

#[pymodule]
fn forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(outcome_reward, m)?)?;
    m.add_function(wrap_pyfunction!(total_reward, m)?)?;
    m.add_function(wrap_pyfunction!(stepwise_reward, m)?)?;
    m.add_function(wrap_pyfunction!(apply_complexity_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(validate_structure, m)?)?;
    m.add_function(wrap_pyfunction!(format_reward, m)?)?;
    m.add_function(wrap_pyfunction!(count_images, m)?)?;
    m.add_function(wrap_pyfunction!(compile_mask, m)?)?;
    m.add_function(wrap_pyfunction!(parse_evaluation, m)?)?;
    m.add_function(wrap_pyfunction!(run_mock_pipeline, m)?)?;
    Ok(())
}
