//! Offline, deterministic Analyzer/Generator pair driven by markers embedded
//! in the instruction text.
//!
//! | marker            | behaviour                                                    |
//! |-------------------|--------------------------------------------------------------|
//! | (none)            | first evaluation passes                                      |
//! | `[[fail:n]]`      | the first n evaluations of the instruction fail              |
//! | `[[complex:n]]`   | never passes, diagnoses prompt complexity, plans n steps     |
//! | `[[knowledge]]`   | never passes, diagnoses a knowledge gap                      |
//! | `[[stepfail:n]]`  | each planned sub-step fails its first n evaluations          |
//! | `[[validity:x]]`  | `validate_text` returns x instead of 1.0                     |
//! | `[[error]]`       | every call fails with a client error                         |
//! | `[[malformed]]`   | evaluations fail with a malformed response                   |
//!
//! Unknown markers are ignored. Decisions depend only on the instruction and
//! the call site, so the mock holds no per-sample state and concurrent
//! samples cannot interfere.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{Analyzer, CallSite, EvaluateRequest, GatewayError, Generator, ReflectRequest, TextRole};
use crate::clock::seeded_digest;
use crate::image_store::ImageStore;
use crate::trajectory::{
    ContentHash, CriterionScores, EvaluationResult, FailureCause, ImageRef, InstructionText, ReflectionText,
};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Directives {
    pub fail: u32,
    pub complex: Option<u32>,
    pub knowledge: bool,
    pub step_fail: u32,
    pub validity: Option<f64>,
    pub error: bool,
    pub malformed: bool,
}

impl Directives {
    pub fn parse(text: &str) -> Self {
        let mut d = Directives::default();
        let mut rest = text;
        while let Some(open) = rest.find("[[") {
            let after = &rest[open + 2..];
            let Some(close) = after.find("]]") else { break };
            let body = &after[..close];
            let (name, arg) = body.split_once(':').unwrap_or((body, ""));
            match name.trim() {
                "fail" => d.fail = arg.trim().parse().unwrap_or(0),
                "complex" => d.complex = arg.trim().parse().ok(),
                "knowledge" => d.knowledge = true,
                "stepfail" => d.step_fail = arg.trim().parse().unwrap_or(0),
                "validity" => d.validity = arg.trim().parse().ok(),
                "error" => d.error = true,
                "malformed" => d.malformed = true,
                _ => {}
            }
            rest = &after[close + 2..];
        }
        d
    }

    /// Whether the main instruction can never pass.
    fn stuck(&self) -> bool {
        self.complex.is_some() || self.knowledge
    }

    fn passes(&self, site: CallSite) -> bool {
        if site.step == 0 {
            !self.stuck() && site.attempt > self.fail
        } else {
            site.attempt > self.step_fail
        }
    }
}

/// Call counts, shared between the two halves of a mock pair.
#[derive(Debug, Default)]
pub struct MockCounters {
    pub generate: AtomicUsize,
    pub revise: AtomicUsize,
    pub execute_step: AtomicUsize,
    pub evaluate: AtomicUsize,
    pub reflect: AtomicUsize,
    pub diagnose: AtomicUsize,
    pub plan: AtomicUsize,
    pub validate_text: AtomicUsize,
}

impl MockCounters {
    pub fn generator_calls(&self) -> usize {
        self.generate.load(Ordering::SeqCst) + self.revise.load(Ordering::SeqCst) + self.execute_step.load(Ordering::SeqCst)
    }
}

fn bump(c: &AtomicUsize) {
    c.fetch_add(1, Ordering::SeqCst);
}

fn client_error(op: &str) -> GatewayError {
    GatewayError::Client(format!("scripted transport failure in {op}"))
}

#[derive(Debug, Clone)]
pub struct MockAnalyzer {
    counters: Arc<MockCounters>,
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    seed: u64,
    images: Option<ImageStore>,
    counters: Arc<MockCounters>,
}

/// Builds a mock pair. Stub images are written to `images` when given,
/// otherwise referenced as `mock://<hash>`.
pub fn scripted_mock(seed: u64, images: Option<ImageStore>) -> (MockAnalyzer, MockGenerator, Arc<MockCounters>) {
    let counters = Arc::new(MockCounters::default());
    (
        MockAnalyzer { counters: counters.clone() },
        MockGenerator { seed, images, counters: counters.clone() },
        counters,
    )
}

impl Analyzer for MockAnalyzer {
    fn id(&self) -> &str {
        "mock-analyzer"
    }

    fn evaluate(&self, req: &EvaluateRequest<'_>) -> Result<EvaluationResult, GatewayError> {
        bump(&self.counters.evaluate);
        let d = Directives::parse(req.instruction);
        if d.error {
            return Err(client_error("evaluate"));
        }
        if d.malformed {
            return Err(GatewayError::MalformedResponse("scripted malformed evaluation".into()));
        }
        let (scores, rationale) = if d.passes(req.site) {
            (CriterionScores::uniform(5), format!("step {} attempt {}: all criteria met", req.site.step, req.site.attempt))
        } else {
            (
                CriterionScores::new(1, 5, 4, 5),
                format!("step {} attempt {}: the requested edit is missing", req.site.step, req.site.attempt),
            )
        };
        let scores = scores.map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        Ok(EvaluationResult::judged(scores, req.pass_threshold, rationale, None))
    }

    fn reflect(&self, req: &ReflectRequest<'_>) -> Result<ReflectionText, GatewayError> {
        bump(&self.counters.reflect);
        if Directives::parse(req.instruction).error {
            return Err(client_error("reflect"));
        }
        Ok(ReflectionText {
            failure_analysis: format!("attempt {}: {}", req.site.attempt, req.evaluation.rationale),
            improvement_plan: format!("attempt {}: apply \"{}\" to the subject only", req.site.attempt + 1, req.instruction),
        })
    }

    fn diagnose(&self, instruction: &str, _history: &[EvaluationResult]) -> Result<FailureCause, GatewayError> {
        bump(&self.counters.diagnose);
        let d = Directives::parse(instruction);
        if d.error {
            return Err(client_error("diagnose"));
        }
        Ok(if d.complex.is_some() {
            FailureCause::PromptComplexity
        } else if d.knowledge {
            FailureCause::KnowledgeGap
        } else {
            FailureCause::Other
        })
    }

    fn plan(
        &self,
        instruction: &str,
        _references: &[ImageRef],
        _history: &[EvaluationResult],
    ) -> Result<Vec<InstructionText>, GatewayError> {
        bump(&self.counters.plan);
        let d = Directives::parse(instruction);
        if d.error {
            return Err(client_error("plan"));
        }
        let n = d.complex.unwrap_or(1).max(1);
        Ok((1..=n).map(|i| InstructionText::new(format!("step {i}/{n}: {instruction}"))).collect())
    }

    fn validate_text(&self, text: &str, _role: TextRole) -> Result<f64, GatewayError> {
        bump(&self.counters.validate_text);
        let d = Directives::parse(text);
        if d.error {
            return Err(client_error("validate_text"));
        }
        Ok(d.validity.unwrap_or(1.0).clamp(0.0, 1.0))
    }
}

impl MockGenerator {
    fn mint(&self, op: &str, text: &str, inputs: &[ImageRef], site: CallSite) -> Result<ImageRef, GatewayError> {
        if Directives::parse(text).error {
            return Err(client_error(op));
        }
        let mut parts: Vec<&[u8]> = vec![op.as_bytes(), text.as_bytes()];
        parts.extend(inputs.iter().map(|i| i.content_hash.as_str().as_bytes()));
        let site_bytes = [site.step.to_le_bytes(), site.attempt.to_le_bytes()].concat();
        parts.push(&site_bytes);
        let digest = seeded_digest(self.seed, &parts);

        // A 2x2 binary PPM whose pixels come from the digest.
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&digest[..12]);
        bytes.extend_from_slice(b"\n# ");
        bytes.extend_from_slice(hex::encode(digest).as_bytes());

        match &self.images {
            Some(store) => store.put(&bytes).map_err(|e| GatewayError::Client(format!("persisting stub image: {e}"))),
            None => {
                let content_hash = ContentHash::of(&bytes);
                Ok(ImageRef { uri: format!("mock://{content_hash}"), content_hash })
            }
        }
    }
}

impl Generator for MockGenerator {
    fn id(&self) -> &str {
        "mock-generator"
    }

    fn generate(&self, instruction: &str, references: &[ImageRef], site: CallSite) -> Result<ImageRef, GatewayError> {
        bump(&self.counters.generate);
        self.mint("generate", instruction, references, site)
    }

    fn revise(
        &self,
        reflection: &ReflectionText,
        previous: &ImageRef,
        _references: &[ImageRef],
        site: CallSite,
    ) -> Result<ImageRef, GatewayError> {
        bump(&self.counters.revise);
        self.mint("revise", &reflection.as_prompt(), std::slice::from_ref(previous), site)
    }

    fn execute_step(
        &self,
        sub_instruction: &InstructionText,
        previous: &[ImageRef],
        site: CallSite,
    ) -> Result<ImageRef, GatewayError> {
        bump(&self.counters.execute_step);
        self.mint("execute_step", &sub_instruction.text, previous, site)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::image;

    fn eval(a: &MockAnalyzer, instruction: &str, site: CallSite) -> bool {
        let img = image("x");
        a.evaluate(&EvaluateRequest { instruction, references: &[], image: &img, pass_threshold: 4, site })
            .unwrap()
            .pass
    }

    #[test]
    fn parses_markers() {
        let d = Directives::parse("turn it blue [[fail:2]] [[stepfail:1]] [[bogus:9]] [[validity:0.5]]");
        assert_eq!(d.fail, 2);
        assert_eq!(d.step_fail, 1);
        assert_eq!(d.validity, Some(0.5));
        assert_eq!(Directives::parse("[[complex:3]]").complex, Some(3));
        assert!(Directives::parse("[[knowledge]]").knowledge);
        assert_eq!(Directives::parse("no markers [[unterminated"), Directives::default());
    }

    #[test]
    fn fail_two_then_pass() {
        let (a, _, _) = scripted_mock(0, None);
        let seq: Vec<bool> = (1..=3).map(|i| eval(&a, "x [[fail:2]]", CallSite::main(i))).collect();
        assert_eq!(seq, [false, false, true]);
    }

    #[test]
    fn default_passes_immediately() {
        let (a, _, _) = scripted_mock(0, None);
        assert!(eval(&a, "plain", CallSite::main(1)));
    }

    #[test]
    fn complex_plans_exact_count() {
        let (a, _, _) = scripted_mock(0, None);
        assert_eq!(a.plan("x [[complex:3]]", &[], &[]).unwrap().len(), 3);
        assert_eq!(a.diagnose("x [[complex:3]]", &[]).unwrap(), FailureCause::PromptComplexity);
        assert!(!eval(&a, "x [[complex:3]]", CallSite::main(9)));
        assert!(eval(&a, "step 1/3: x [[complex:3]]", CallSite::sub_step(1, 1)));
    }

    #[test]
    fn images_are_deterministic_per_seed_and_site() {
        let (_, g, _) = scripted_mock(7, None);
        let (_, g2, _) = scripted_mock(7, None);
        let (_, other, _) = scripted_mock(8, None);
        let a = g.generate("x", &[], CallSite::main(1)).unwrap();
        assert_eq!(a, g2.generate("x", &[], CallSite::main(1)).unwrap());
        assert_ne!(a, other.generate("x", &[], CallSite::main(1)).unwrap());
        assert_ne!(a, g.generate("x", &[], CallSite::main(2)).unwrap());
    }

    #[test]
    fn stub_files_are_written_and_verifiable() {
        let dir = tempfile::tempdir().unwrap();
        let (_, g, _) = scripted_mock(1, Some(ImageStore::open(dir.path()).unwrap()));
        let img = g.generate("x", &[], CallSite::main(1)).unwrap();
        assert_eq!(img.verify(), crate::trajectory::HashCheck::Match);
    }
}
