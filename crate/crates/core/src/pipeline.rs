//! The escalation state machine that turns one instruction into one
//! trajectory.
//!
//! ```text
//! generate G1 -> evaluate E1 --pass--> Direct
//!      |fail
//!      v
//! reflect R_i -> revise G_{i+1} -> evaluate E_{i+1} --pass--> Reflection (K = i+1)
//!      | (up to max_reflection_iters times)
//!      v
//! diagnose --other cause--> Filtered(cause)
//!      |prompt complexity
//!      v
//! plan S_2..S_{N+1} -> per step: execute, evaluate, retry --all pass--> prune --> MultiStep
//!                                                        --exhausted--> Filtered(other)
//! ```
//!
//! Only Analyzer verdicts lead to `Filtered`; transport and parse failures
//! abort the sample with an error.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Map;
use thiserror::Error;
use tracing::{debug, info};

use crate::clock::{seeded_uuid, Clock, SystemClock};
use crate::gateway::{Analyzer, CallSite, EvaluateRequest, GatewayError, Generator, ReflectRequest};
use crate::grammar::GrammarLimits;
use crate::trajectory::{
    EvaluationResult, FailureCause, ImageRef, InstructionText, Mode, Payload, Provenance, Segment, SegmentKind,
    Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub max_reflection_iters: u32,
    pub max_plan_steps: u32,
    pub per_step_retries: u32,
    pub pass_threshold: u8,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { max_reflection_iters: 3, max_plan_steps: 8, per_step_retries: 2, pass_threshold: 4 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_reflection_iters < 1 {
            return Err(EngineError::InvalidConfig("max_reflection_iters must be >= 1".into()));
        }
        if self.max_plan_steps < 1 {
            return Err(EngineError::InvalidConfig("max_plan_steps must be >= 1".into()));
        }
        if !(1..=5).contains(&self.pass_threshold) {
            return Err(EngineError::InvalidConfig("pass_threshold must be within 1..=5".into()));
        }
        Ok(())
    }

    /// Grammar bounds implied by this configuration.
    pub fn grammar_limits(&self) -> GrammarLimits {
        GrammarLimits { max_reflection_generations: self.max_reflection_iters + 1, max_plan_steps: self.max_plan_steps }
    }

    /// Upper bound on generator calls for one sample.
    pub fn max_generator_calls(&self) -> u64 {
        1 + self.max_reflection_iters as u64 + self.max_plan_steps as u64 * (1 + self.per_step_retries as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleInput {
    pub instruction: String,
    #[serde(default)]
    pub references: Vec<ImageRef>,
    #[serde(default)]
    pub category: Option<String>,
}

impl SampleInput {
    pub fn new(instruction: impl Into<String>) -> Self {
        Self { instruction: instruction.into(), references: Vec::new(), category: None }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("invalid sample: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PruneError {
    #[error("expected a multi_step trace, got {0}")]
    WrongMode(Mode),
    #[error("trace does not start with G1 E1")]
    MissingDirect,
    #[error("trace has no sub-steps")]
    NoSubSteps,
    #[error("sub-step {0} is incomplete")]
    IncompleteStep(u32),
}

/// Appends segments with per-kind running indices. Sub-instructions start
/// at 2 to match their position in the sample definition.
struct Trace {
    segments: Vec<Segment>,
    next: [u32; 4],
}

impl Trace {
    fn new() -> Self {
        Self { segments: Vec::new(), next: [1, 1, 1, 2] }
    }

    fn push(&mut self, payload: Payload) {
        let slot = match payload.kind() {
            SegmentKind::Generation => 0,
            SegmentKind::Evaluation => 1,
            SegmentKind::Reflection => 2,
            SegmentKind::SubInstruction => 3,
        };
        self.segments.push(Segment::new(self.next[slot], payload));
        self.next[slot] += 1;
    }
}

pub struct Engine<A, G> {
    analyzer: A,
    generator: G,
    config: PipelineConfig,
    clock: Arc<dyn Clock>,
    seed: u64,
}

impl<A: Analyzer, G: Generator> Engine<A, G> {
    pub fn new(analyzer: A, generator: G, config: PipelineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Self { analyzer, generator, config, clock: Arc::new(SystemClock), seed: 0 })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Seed for trajectory identifiers.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run_sample(&self, input: &SampleInput) -> Result<Trajectory, EngineError> {
        self.run_indexed(input, 0)
    }

    fn run_indexed(&self, input: &SampleInput, ordinal: usize) -> Result<Trajectory, EngineError> {
        if input.instruction.trim().is_empty() {
            return Err(EngineError::InvalidInput("instruction is empty".into()));
        }
        let mut trace = Trace::new();
        let (mode, cause) = self.escalate(input, &mut trace)?;

        let id = seeded_uuid(self.seed, &[input.instruction.as_bytes(), &(ordinal as u64).to_le_bytes()]);
        let mut trajectory = Trajectory {
            id: id.to_string(),
            mode,
            instruction: input.instruction.clone(),
            references: input.references.clone(),
            segments: trace.segments,
            category: input.category.clone(),
            provenance: Provenance {
                analyzer: self.analyzer.id().to_owned(),
                generator: self.generator.id().to_owned(),
                created_at: self.clock.now(),
                extra: Map::new(),
            },
            verification: None,
            failure_cause: cause,
            extra: Map::new(),
        };
        if mode == Mode::MultiStep {
            trajectory = prune_multistep(&trajectory).expect("engine emits complete multi-step traces");
        }
        info!(id = %trajectory.id, %mode, shape = %trajectory.shape(), "sample finished");
        Ok(trajectory)
    }

    fn evaluate(
        &self,
        instruction: &str,
        references: &[ImageRef],
        image: &ImageRef,
        site: CallSite,
    ) -> Result<EvaluationResult, GatewayError> {
        self.analyzer.evaluate(&EvaluateRequest {
            instruction,
            references,
            image,
            pass_threshold: self.config.pass_threshold,
            site,
        })
    }

    fn escalate(&self, input: &SampleInput, trace: &mut Trace) -> Result<(Mode, Option<FailureCause>), EngineError> {
        let instruction = input.instruction.as_str();
        let refs = input.references.as_slice();

        // Direct attempt.
        let mut image = self.generator.generate(instruction, refs, CallSite::main(1))?;
        let mut evaluation = self.evaluate(instruction, refs, &image, CallSite::main(1))?;
        trace.push(Payload::Image(image.clone()));
        trace.push(Payload::Evaluation(evaluation.clone()));
        if evaluation.pass {
            return Ok((Mode::Direct, None));
        }
        let mut history = vec![evaluation.clone()];

        // Reflection loop.
        for iter in 1..=self.config.max_reflection_iters {
            let site = CallSite::main(iter);
            let reflection = self.analyzer.reflect(&ReflectRequest {
                instruction,
                references: refs,
                image: &image,
                evaluation: &evaluation,
                site,
            })?;
            let next = CallSite::main(iter + 1);
            image = self.generator.revise(&reflection, &image, refs, next)?;
            evaluation = self.evaluate(instruction, refs, &image, next)?;
            trace.push(Payload::Reflection(reflection));
            trace.push(Payload::Image(image.clone()));
            trace.push(Payload::Evaluation(evaluation.clone()));
            if evaluation.pass {
                return Ok((Mode::Reflection, None));
            }
            history.push(evaluation.clone());
        }

        // Diagnosis.
        let cause = self.analyzer.diagnose(instruction, &history)?;
        debug!(%cause, "reflection exhausted");
        if cause != FailureCause::PromptComplexity {
            return Ok((Mode::Filtered, Some(cause)));
        }

        // Decomposition.
        let plan = self.analyzer.plan(instruction, refs, &history)?;
        if plan.is_empty() || plan.len() > self.config.max_plan_steps as usize {
            debug!(steps = plan.len(), "plan rejected");
            return Ok((Mode::Filtered, Some(FailureCause::Other)));
        }
        let mut inputs: Vec<ImageRef> = refs.to_vec();
        for (n, sub) in plan.iter().enumerate() {
            let step = n as u32 + 1;
            trace.push(Payload::Instruction(sub.clone()));
            match self.run_step(sub, &inputs, step, trace)? {
                Some(output) => inputs = vec![output],
                None => return Ok((Mode::Filtered, Some(FailureCause::Other))),
            }
        }
        Ok((Mode::MultiStep, None))
    }

    /// Executes one planned sub-step with retries; returns the passing image.
    fn run_step(
        &self,
        sub: &InstructionText,
        inputs: &[ImageRef],
        step: u32,
        trace: &mut Trace,
    ) -> Result<Option<ImageRef>, EngineError> {
        for attempt in 1..=1 + self.config.per_step_retries {
            let site = CallSite::sub_step(step, attempt);
            let image = self.generator.execute_step(sub, inputs, site)?;
            let evaluation = self.evaluate(&sub.text, inputs, &image, site)?;
            let pass = evaluation.pass;
            trace.push(Payload::Image(image.clone()));
            trace.push(Payload::Evaluation(evaluation));
            if pass {
                return Ok(Some(image));
            }
        }
        Ok(None)
    }

    /// Runs every input with at most `parallelism` samples in flight.
    /// Output order follows input order; failed samples are counted in the
    /// stats and reported in `errors`.
    pub fn run_batch(&self, inputs: &[SampleInput], parallelism: usize) -> BatchOutcome {
        let parallelism = parallelism.clamp(1, inputs.len().max(1));
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<Trajectory, EngineError>>> = Vec::new();
        slots.resize_with(inputs.len(), || None);
        let slots = std::sync::Mutex::new(slots);

        std::thread::scope(|scope| {
            for _ in 0..parallelism {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(input) = inputs.get(i) else { break };
                    let result = self.run_indexed(input, i);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(result);
                });
            }
        });

        let mut outcome = BatchOutcome::default();
        outcome.stats.total = inputs.len();
        for (index, slot) in slots.into_inner().unwrap_or_else(|e| e.into_inner()).into_iter().enumerate() {
            match slot {
                Some(Ok(t)) => {
                    outcome.stats.record(&t);
                    outcome.trajectories.push(t);
                }
                Some(Err(e)) => {
                    outcome.stats.errors += 1;
                    outcome.errors.push(SampleError { index, message: e.to_string() });
                }
                None => unreachable!("every slot is filled before the scope ends"),
            }
        }
        outcome
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredCounts {
    pub prompt_complexity: usize,
    pub knowledge_gap: usize,
    pub other: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub total: usize,
    pub direct: usize,
    pub reflection: usize,
    pub multi_step: usize,
    pub filtered: FilteredCounts,
    pub errors: usize,
}

impl BatchStats {
    fn record(&mut self, t: &Trajectory) {
        match t.mode {
            Mode::Direct => self.direct += 1,
            Mode::Reflection => self.reflection += 1,
            Mode::MultiStep => self.multi_step += 1,
            Mode::Filtered => match t.failure_cause.unwrap_or(FailureCause::Other) {
                FailureCause::PromptComplexity => self.filtered.prompt_complexity += 1,
                FailureCause::KnowledgeGap => self.filtered.knowledge_gap += 1,
                FailureCause::Other => self.filtered.other += 1,
            },
        }
    }

    pub fn accounted(&self) -> usize {
        self.direct
            + self.reflection
            + self.multi_step
            + self.filtered.prompt_complexity
            + self.filtered.knowledge_gap
            + self.filtered.other
            + self.errors
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleError {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub trajectories: Vec<Trajectory>,
    pub stats: BatchStats,
    pub errors: Vec<SampleError>,
}

/// Drops the failed reflection loop from a multi-step trace.
///
/// Keeps G1 and E1, then for every sub-step block `S (G E)+` keeps S and the
/// final G/E pair (earlier pairs are failed retries). Reflection segments
/// are dropped wherever they appear. Sub-step segments are re-indexed
/// 2..=N+1.
pub fn prune_multistep(raw: &Trajectory) -> Result<Trajectory, PruneError> {
    if raw.mode != Mode::MultiStep {
        return Err(PruneError::WrongMode(raw.mode));
    }
    let segs = raw.segments.as_slice();
    let (g1, e1) = match segs {
        [g, e, ..] if g.kind() == SegmentKind::Generation && e.kind() == SegmentKind::Evaluation => (g, e),
        _ => return Err(PruneError::MissingDirect),
    };
    let first_step = segs.iter().position(|s| s.kind() == SegmentKind::SubInstruction).ok_or(PruneError::NoSubSteps)?;

    let mut out = vec![Segment { index: 1, ..g1.clone() }, Segment { index: 1, ..e1.clone() }];
    let mut step_index = 2u32;
    let mut rest = &segs[first_step..];
    while let Some((sub, tail)) = rest.split_first() {
        let end = tail.iter().position(|s| s.kind() == SegmentKind::SubInstruction).unwrap_or(tail.len());
        let block: Vec<&Segment> = tail[..end].iter().filter(|s| s.kind() != SegmentKind::Reflection).collect();
        let well_formed = !block.is_empty()
            && block.len().is_multiple_of(2)
            && block.chunks(2).all(|p| p[0].kind() == SegmentKind::Generation && p[1].kind() == SegmentKind::Evaluation);
        if !well_formed {
            return Err(PruneError::IncompleteStep(step_index));
        }
        let (g, e) = (block[block.len() - 2], block[block.len() - 1]);
        out.push(Segment { index: step_index, ..sub.clone() });
        out.push(Segment { index: step_index, ..g.clone() });
        out.push(Segment { index: step_index, ..e.clone() });
        step_index += 1;
        rest = &tail[end..];
    }

    Ok(Trajectory { segments: out, ..raw.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{failing, image, multistep, passing, reflection_text};
    use crate::gateway::scripted_mock;
    use crate::grammar::validate_structure;

    fn engine() -> Engine<crate::gateway::MockAnalyzer, crate::gateway::MockGenerator> {
        let (a, g, _) = scripted_mock(1, None);
        Engine::new(a, g, PipelineConfig::default()).unwrap()
    }

    fn raw_multistep(reflections: u32, steps: u32) -> Trajectory {
        let mut trace = Trace::new();
        trace.push(Payload::Image(image("g1")));
        trace.push(Payload::Evaluation(failing()));
        for i in 1..=reflections {
            trace.push(Payload::Reflection(reflection_text(i)));
            trace.push(Payload::Image(image(&format!("r{i}"))));
            trace.push(Payload::Evaluation(failing()));
        }
        for s in 1..=steps {
            trace.push(Payload::Instruction(InstructionText::new(format!("step {s}"))));
            trace.push(Payload::Image(image(&format!("s{s}"))));
            trace.push(Payload::Evaluation(passing()));
        }
        Trajectory { segments: trace.segments, ..multistep(1) }
    }

    #[test]
    fn prune_drops_reflection_loop() {
        let raw = raw_multistep(2, 2);
        let pruned = prune_multistep(&raw).unwrap();
        assert_eq!(pruned.shape(), "G1 E1 S2 G2 E2 S3 G3 E3");
        assert_eq!(pruned.images().count(), 3);
        assert!(validate_structure(&pruned).valid);
        assert_eq!(pruned.segments[3].as_image(), Some(&image("s1")));
    }

    #[test]
    fn prune_without_reflections_is_identity() {
        let raw = raw_multistep(0, 3);
        assert_eq!(prune_multistep(&raw).unwrap(), raw);
    }

    #[test]
    fn prune_rejects_incomplete_step() {
        let mut raw = raw_multistep(1, 2);
        assert_eq!(raw.shape(), "G1 E1 R1 G2 E2 S2 G3 E3 S3 G4 E4");
        raw.segments.remove(7);
        assert_eq!(prune_multistep(&raw), Err(PruneError::IncompleteStep(2)));
        raw.segments.truncate(2);
        assert_eq!(prune_multistep(&raw), Err(PruneError::NoSubSteps));
        raw.segments.clear();
        assert_eq!(prune_multistep(&raw), Err(PruneError::MissingDirect));
    }

    #[test]
    fn prune_keeps_last_retry() {
        let mut raw = raw_multistep(0, 1);
        raw.segments.truncate(3);
        raw.segments.push(Segment::generation(2, image("retry-fail")));
        raw.segments.push(Segment::evaluation(2, failing()));
        raw.segments.push(Segment::generation(3, image("retry-pass")));
        raw.segments.push(Segment::evaluation(3, passing()));
        let pruned = prune_multistep(&raw).unwrap();
        assert_eq!(pruned.shape(), "G1 E1 S2 G2 E2");
        assert_eq!(pruned.segments[3].as_image(), Some(&image("retry-pass")));
    }

    #[test]
    fn prune_is_idempotent() {
        let once = prune_multistep(&raw_multistep(3, 4)).unwrap();
        assert_eq!(prune_multistep(&once).unwrap(), once);
    }

    #[test]
    fn direct_path() {
        let t = engine().run_sample(&SampleInput::new("paint the door green")).unwrap();
        assert_eq!(t.mode, Mode::Direct);
        assert_eq!(t.shape(), "G1 E1");
    }

    #[test]
    fn reflection_path_after_two_failures() {
        let t = engine().run_sample(&SampleInput::new("paint the door green [[fail:2]]")).unwrap();
        assert_eq!(t.mode, Mode::Reflection);
        assert_eq!(t.shape(), "G1 E1 R1 G2 E2 R2 G3 E3");
    }

    #[test]
    fn multistep_path_is_pruned() {
        let t = engine().run_sample(&SampleInput::new("rebuild the kitchen [[complex:3]]")).unwrap();
        assert_eq!(t.mode, Mode::MultiStep);
        assert_eq!(t.shape(), "G1 E1 S2 G2 E2 S3 G3 E3 S4 G4 E4");
        assert_eq!(t.segments_of(SegmentKind::Reflection).count(), 0);
    }

    #[test]
    fn knowledge_gap_is_filtered() {
        let t = engine().run_sample(&SampleInput::new("draw the 1907 flag of Tonga [[knowledge]]")).unwrap();
        assert_eq!(t.mode, Mode::Filtered);
        assert_eq!(t.failure_cause, Some(FailureCause::KnowledgeGap));
        assert!(validate_structure(&t).valid);
    }

    #[test]
    fn oversized_plan_is_filtered() {
        let (a, g, counters) = scripted_mock(1, None);
        let cfg = PipelineConfig { max_plan_steps: 2, ..Default::default() };
        let t = Engine::new(a, g, cfg).unwrap().run_sample(&SampleInput::new("x [[complex:3]]")).unwrap();
        assert_eq!(t.failure_cause, Some(FailureCause::Other));
        assert_eq!(counters.execute_step.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn step_retries_then_filter() {
        let (a, g, counters) = scripted_mock(1, None);
        let t = Engine::new(a, g, PipelineConfig::default())
            .unwrap()
            .run_sample(&SampleInput::new("x [[complex:2]] [[stepfail:5]]"))
            .unwrap();
        assert_eq!(t.mode, Mode::Filtered);
        assert_eq!(t.failure_cause, Some(FailureCause::Other));
        assert_eq!(counters.execute_step.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn step_retry_recovers() {
        let t = engine().run_sample(&SampleInput::new("x [[complex:2]] [[stepfail:1]]")).unwrap();
        assert_eq!(t.mode, Mode::MultiStep);
        assert_eq!(t.shape(), "G1 E1 S2 G2 E2 S3 G3 E3");
        assert!(t.evaluations().skip(1).all(|e| e.pass));
    }

    #[test]
    fn transport_errors_abort() {
        let err = engine().run_sample(&SampleInput::new("x [[error]]")).unwrap_err();
        assert!(matches!(err, EngineError::Gateway(GatewayError::Client(_))));
        let err = engine().run_sample(&SampleInput::new("x [[malformed]]")).unwrap_err();
        assert!(matches!(err, EngineError::Gateway(GatewayError::MalformedResponse(_))));
    }

    #[test]
    fn empty_instruction_rejected() {
        assert!(matches!(engine().run_sample(&SampleInput::new("  ")), Err(EngineError::InvalidInput(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let (a, g, _) = scripted_mock(1, None);
        let cfg = PipelineConfig { max_reflection_iters: 0, ..Default::default() };
        assert!(Engine::new(a, g, cfg).is_err());
    }

    #[test]
    fn batch_stats() {
        let inputs: Vec<_> = ["a", "b [[fail:2]]", "c [[complex:3]]"].into_iter().map(SampleInput::new).collect();
        let out = engine().run_batch(&inputs, 3);
        assert_eq!(out.stats.direct, 1);
        assert_eq!(out.stats.reflection, 1);
        assert_eq!(out.stats.multi_step, 1);
        assert_eq!(out.stats.accounted(), 3);
        let modes: Vec<_> = out.trajectories.iter().map(|t| t.mode).collect();
        assert_eq!(modes, [Mode::Direct, Mode::Reflection, Mode::MultiStep]);
    }

    #[test]
    fn batch_edge_cases() {
        let out = engine().run_batch(&[], 4);
        assert!(out.trajectories.is_empty());
        assert_eq!(out.stats, BatchStats::default());

        let out = engine().run_batch(&[SampleInput::new("x [[error]]")], 4);
        assert!(out.trajectories.is_empty());
        assert_eq!(out.stats.errors, 1);
        assert_eq!(out.stats.total, 1);
        assert_eq!(out.errors[0].index, 0);
    }

    #[test]
    fn duplicate_instructions_get_distinct_ids() {
        let inputs = vec![SampleInput::new("same"), SampleInput::new("same")];
        let out = engine().run_batch(&inputs, 2);
        assert_ne!(out.trajectories[0].id, out.trajectories[1].id);
    }
}
