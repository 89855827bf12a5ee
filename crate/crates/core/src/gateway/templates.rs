//! Prompt templates for the Analyzer operations, one file per operation.
//!
//! Placeholders are written `{name}`. The shipped defaults are editable
//! starting points; deployments are expected to supply their own.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {operation} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { operation: &'static str, placeholder: &'static str },
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub evaluate: String,
    pub reflect: String,
    pub diagnose: String,
    pub plan: String,
    pub validate_text: String,
}

const OPERATIONS: [(&str, &[&str]); 5] = [
    ("evaluate", &["instruction"]),
    ("reflect", &["instruction", "evaluation"]),
    ("diagnose", &["instruction", "history"]),
    ("plan", &["instruction", "history", "max_steps"]),
    ("validate_text", &["text", "role"]),
];

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            evaluate: "Instruction: {instruction}\n\
                Judge the last image against the instruction and the reference images on four criteria, \
                each scored 1-5: instruction (edit executed as asked), consistency (unedited regions preserved), \
                quality (visual fidelity, no artifacts), knowledge (physically and commonsensically plausible). \
                Reply with one JSON object: {\"instruction\":n,\"consistency\":n,\"quality\":n,\"knowledge\":n,\"rationale\":\"...\"}"
                .into(),
            reflect: "Instruction: {instruction}\nEvaluation of the rejected image: {evaluation}\n\
                Write a failure analysis naming the specific errors and an improvement plan for the next attempt. \
                Reply with one JSON object: {\"failure_analysis\":\"...\",\"improvement_plan\":\"...\"}"
                .into(),
            diagnose: "Instruction: {instruction}\nEvaluations of all failed attempts:\n{history}\n\
                Identify the root cause of the repeated failure. \
                Reply with one JSON object: {\"cause\":\"prompt_complexity\"|\"knowledge_gap\"|\"other\"}"
                .into(),
            plan: "Instruction: {instruction}\nFailure history:\n{history}\n\
                Break the instruction into at most {max_steps} sequential sub-instructions, each executable on the \
                previous step's output. Reply with one JSON object: {\"steps\":[\"...\"]}"
                .into(),
            validate_text: "Role: {role}\nText:\n{text}\n\
                Rate the logical validity of this intermediate reasoning text from 0 to 1. \
                Reply with one JSON object: {\"validity\":x}"
                .into(),
        }
    }
}

impl PromptTemplates {
    /// Loads `<dir>/<operation>.txt` for each operation, falling back to the
    /// default for files that do not exist.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut t = Self::default();
        for (op, _) in OPERATIONS {
            let path = dir.join(format!("{op}.txt"));
            match fs::read_to_string(&path) {
                Ok(text) => *t.slot_mut(op) = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => return Err(TemplateError::Io { path: path.display().to_string(), source }),
            }
        }
        t.validate()?;
        Ok(t)
    }

    fn slot_mut(&mut self, op: &str) -> &mut String {
        match op {
            "evaluate" => &mut self.evaluate,
            "reflect" => &mut self.reflect,
            "diagnose" => &mut self.diagnose,
            "plan" => &mut self.plan,
            _ => &mut self.validate_text,
        }
    }

    fn slot(&self, op: &str) -> &str {
        match op {
            "evaluate" => &self.evaluate,
            "reflect" => &self.reflect,
            "diagnose" => &self.diagnose,
            "plan" => &self.plan,
            _ => &self.validate_text,
        }
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for (operation, required) in OPERATIONS {
            for &placeholder in required {
                if !self.slot(operation).contains(&format!("{{{placeholder}}}")) {
                    return Err(TemplateError::MissingPlaceholder { operation, placeholder });
                }
            }
        }
        Ok(())
    }
}

/// Substitutes `{name}` placeholders; unknown placeholders are left as is.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    values
        .iter()
        .fold(template.to_owned(), |acc, (name, value)| acc.replace(&format!("{{{name}}}"), value))
}
