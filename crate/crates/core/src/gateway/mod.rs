//! Analyzer and Generator contracts, plus the live HTTP and scripted mock
//! implementations.
//!
//! The Analyzer scores images, writes reflections, diagnoses failures, plans
//! sub-steps and grades intermediate texts. The Generator produces images.
//! Every call carries a [`CallSite`] so implementations can be stateless.

mod live;
mod mock;
pub mod parse;
pub mod templates;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::reasoning_texts;
use crate::trajectory::{
    EvaluationResult, FailureCause, ImageRef, InstructionText, ReflectionText, Trajectory,
};

pub use live::{live_client, EndpointConfig, LiveAnalyzer, LiveGenerator, ANALYZER_KEY_ENV, ANALYZER_URL_ENV, GENERATOR_KEY_ENV, GENERATOR_URL_ENV};
pub use mock::{scripted_mock, Directives, MockAnalyzer, MockGenerator, MockCounters};
pub use parse::parse_evaluation;
pub use templates::{PromptTemplates, TemplateError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    /// Transport or protocol failure that survived the retry budget.
    #[error("client error: {0}")]
    Client(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

/// Where in the escalation ladder a call is made.
///
/// `step` 0 is the original instruction (the direct attempt and the
/// reflection loop); `step` s >= 1 is the s-th planned sub-step. `attempt`
/// counts from 1 within the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallSite {
    pub step: u32,
    pub attempt: u32,
}

impl CallSite {
    pub fn main(attempt: u32) -> Self {
        Self { step: 0, attempt }
    }

    pub fn sub_step(step: u32, attempt: u32) -> Self {
        Self { step, attempt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextRole {
    FailureAnalysis,
    ReflectionPrompt,
    StepDecomposition,
}

impl TextRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TextRole::FailureAnalysis => "failure_analysis",
            TextRole::ReflectionPrompt => "reflection_prompt",
            TextRole::StepDecomposition => "step_decomposition",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvaluateRequest<'a> {
    pub instruction: &'a str,
    pub references: &'a [ImageRef],
    pub image: &'a ImageRef,
    pub pass_threshold: u8,
    pub site: CallSite,
}

#[derive(Debug, Clone, Copy)]
pub struct ReflectRequest<'a> {
    pub instruction: &'a str,
    pub references: &'a [ImageRef],
    pub image: &'a ImageRef,
    pub evaluation: &'a EvaluationResult,
    pub site: CallSite,
}

pub trait Analyzer: Send + Sync {
    fn id(&self) -> &str;

    /// Scores are always within 1..=5 and `pass` follows the request threshold.
    fn evaluate(&self, req: &EvaluateRequest<'_>) -> Result<EvaluationResult, GatewayError>;

    fn reflect(&self, req: &ReflectRequest<'_>) -> Result<ReflectionText, GatewayError>;

    fn diagnose(&self, instruction: &str, history: &[EvaluationResult]) -> Result<FailureCause, GatewayError>;

    /// Returns at least one sub-instruction.
    fn plan(
        &self,
        instruction: &str,
        references: &[ImageRef],
        history: &[EvaluationResult],
    ) -> Result<Vec<InstructionText>, GatewayError>;

    /// Validity of an intermediate text, clamped to [0, 1].
    fn validate_text(&self, text: &str, role: TextRole) -> Result<f64, GatewayError>;
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, instruction: &str, references: &[ImageRef], site: CallSite) -> Result<ImageRef, GatewayError>;

    fn revise(
        &self,
        reflection: &ReflectionText,
        previous: &ImageRef,
        references: &[ImageRef],
        site: CallSite,
    ) -> Result<ImageRef, GatewayError>;

    /// `previous` is the prior step's output, or the original references for
    /// the first sub-step.
    fn execute_step(
        &self,
        sub_instruction: &InstructionText,
        previous: &[ImageRef],
        site: CallSite,
    ) -> Result<ImageRef, GatewayError>;
}

impl<T: Analyzer + ?Sized> Analyzer for &T {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn evaluate(&self, req: &EvaluateRequest<'_>) -> Result<EvaluationResult, GatewayError> {
        (**self).evaluate(req)
    }
    fn reflect(&self, req: &ReflectRequest<'_>) -> Result<ReflectionText, GatewayError> {
        (**self).reflect(req)
    }
    fn diagnose(&self, instruction: &str, history: &[EvaluationResult]) -> Result<FailureCause, GatewayError> {
        (**self).diagnose(instruction, history)
    }
    fn plan(
        &self,
        instruction: &str,
        references: &[ImageRef],
        history: &[EvaluationResult],
    ) -> Result<Vec<InstructionText>, GatewayError> {
        (**self).plan(instruction, references, history)
    }
    fn validate_text(&self, text: &str, role: TextRole) -> Result<f64, GatewayError> {
        (**self).validate_text(text, role)
    }
}

impl<T: Generator + ?Sized> Generator for &T {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, instruction: &str, references: &[ImageRef], site: CallSite) -> Result<ImageRef, GatewayError> {
        (**self).generate(instruction, references, site)
    }
    fn revise(
        &self,
        reflection: &ReflectionText,
        previous: &ImageRef,
        references: &[ImageRef],
        site: CallSite,
    ) -> Result<ImageRef, GatewayError> {
        (**self).revise(reflection, previous, references, site)
    }
    fn execute_step(
        &self,
        sub_instruction: &InstructionText,
        previous: &[ImageRef],
        site: CallSite,
    ) -> Result<ImageRef, GatewayError> {
        (**self).execute_step(sub_instruction, previous, site)
    }
}

/// Asks the Analyzer to grade every intermediate reasoning text of a
/// trajectory, in segment order. The result feeds the step-wise reward.
pub fn grade_reasoning(analyzer: &dyn Analyzer, trajectory: &Trajectory) -> Result<Vec<f64>, GatewayError> {
    reasoning_texts(trajectory)
        .into_iter()
        .map(|(role, text)| analyzer.validate_text(&text, role).map(|v| v.clamp(0.0, 1.0)))
        .collect()
}
