use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use forge_core::clock::{Clock, FixedClock, SystemClock};
use forge_core::config::{ConfigError, ForgeConfig};
use forge_core::gateway::{live_client, scripted_mock, Analyzer, Generator, PromptTemplates};
use forge_core::image_store::ImageStore;
use forge_core::mask::{compile_mask_with, mask_stats, MaskError};
use forge_core::pipeline::BatchOutcome;
use forge_core::reward::score_group_with;
use forge_core::store::{default_ledger_path, Dataset, StoreError, Taxonomy};
use forge_core::{validate_structure_with, Engine, RewardBreakdown, RolloutRecord, SampleInput, Trajectory};
use forge_service::{AppState, Tokens};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{info, warn};

use crate::args::*;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration.
    Usage(String),
    /// A file could not be read or written.
    Io(String),
    /// Input data failed validation.
    Invalid(String),
    /// Anything else that stopped the command.
    Runtime(String),
}

impl Failure {
    fn kind(&self) -> (&'static str, u8, &str) {
        match self {
            Failure::Usage(m) => ("usage", 2, m),
            Failure::Io(m) => ("io", 1, m),
            Failure::Invalid(m) => ("invalid", 3, m),
            Failure::Runtime(m) => ("runtime", 1, m),
        }
    }

    /// Prints one JSON error line on stderr and returns the exit code.
    pub fn report(&self) -> ExitCode {
        let (kind, code, message) = self.kind();
        eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
        ExitCode::from(code)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => Failure::Io(e.to_string()),
            StoreError::Corrupt { .. } | StoreError::InvalidRetained { .. } | StoreError::DuplicateId(_) => {
                Failure::Invalid(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

struct Context {
    config: ForgeConfig,
    seed: u64,
    clock: Arc<dyn Clock>,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let config = ForgeConfig::resolve(cli.config.as_deref())?;
    let clock: Arc<dyn Clock> = match &cli.timestamp {
        Some(ts) => {
            let at = DateTime::parse_from_rfc3339(ts)
                .map_err(|e| Failure::Usage(format!("--timestamp {ts:?}: {e}")))?
                .with_timezone(&Utc);
            Arc::new(FixedClock(at))
        }
        None => Arc::new(SystemClock),
    };
    let ctx = Context { config, seed: cli.seed, clock };
    match cli.command {
        Command::Pipeline(PipelineCmd::Run(a)) => pipeline_run(&ctx, a),
        Command::Rewards(RewardsCmd::Score(a)) => rewards_score(&ctx, a),
        Command::Masks(MasksCmd::Compile(a)) => masks_compile(&ctx, a),
        Command::Dataset(DatasetCmd::Stats(a)) => dataset_stats(&ctx, a),
        Command::Dataset(DatasetCmd::Validate(a)) => dataset_validate(&ctx, a),
        Command::Dataset(DatasetCmd::Export(a)) => dataset_export(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Failure::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<usize, Failure> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| Failure::Runtime(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(n)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn open_images(dir: Option<PathBuf>) -> Result<Option<ImageStore>, Failure> {
    dir.map(|d| ImageStore::open(&d).map_err(|e| io_err(&d, e))).transpose()
}

fn run_engine<A: Analyzer, G: Generator>(
    ctx: &Context,
    analyzer: A,
    generator: G,
    inputs: &[SampleInput],
    parallel: usize,
) -> Result<BatchOutcome, Failure> {
    let engine = Engine::new(analyzer, generator, ctx.config.pipeline)
        .map_err(|e| Failure::Usage(e.to_string()))?
        .with_seed(ctx.seed)
        .with_clock(ctx.clock.clone());
    Ok(engine.run_batch(inputs, parallel))
}

fn pipeline_run(ctx: &Context, a: PipelineRunArgs) -> Result<(), Failure> {
    let inputs: Vec<SampleInput> = read_jsonl(&a.input)?;
    let images = open_images(a.images.or_else(|| ctx.config.dataset.images.clone()))?;
    let parallel = a.parallel as usize;
    let outcome = if a.live {
        let images = images.ok_or_else(|| Failure::Usage("--live needs an image store: pass --images or set dataset.images".into()))?;
        let templates = match &ctx.config.templates_dir {
            Some(dir) => PromptTemplates::load_dir(dir).map_err(|e| Failure::Usage(e.to_string()))?,
            None => PromptTemplates::default(),
        };
        let (analyzer, generator) = live_client(
            ctx.config.analyzer.clone(),
            ctx.config.generator.clone(),
            templates,
            images,
            ctx.config.pipeline.max_plan_steps,
        )
        .map_err(|e| Failure::Usage(e.to_string()))?;
        run_engine(ctx, analyzer, generator, &inputs, parallel)?
    } else {
        let (analyzer, generator, _) = scripted_mock(ctx.seed, images);
        run_engine(ctx, analyzer, generator, &inputs, parallel)?
    };

    for e in &outcome.errors {
        warn!(index = e.index, "sample failed: {}", e.message);
    }
    let written = write_jsonl(&a.out, &outcome.trajectories)?;
    if let Some(path) = &a.stats {
        let text = serde_json::to_string_pretty(&outcome.stats).map_err(|e| Failure::Runtime(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
    }
    info!(written, "pipeline run finished");
    print_json(&json!({"written": written, "stats": outcome.stats, "errors": outcome.errors}))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupInput {
    group_id: serde_json::Value,
    rollouts: Vec<RolloutRecord>,
}

#[derive(Debug, Serialize)]
struct GroupOutput {
    group_id: serde_json::Value,
    breakdowns: Vec<RewardBreakdown>,
}

fn rewards_score(ctx: &Context, a: RewardsScoreArgs) -> Result<(), Failure> {
    let groups: Vec<GroupInput> = read_jsonl(&a.group)?;
    let weights = ctx.config.rewards.weights();
    let limits = ctx.config.pipeline.grammar_limits();
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        if g.rollouts.len() != ctx.config.rewards.rollout_size {
            info!(group = %g.group_id, size = g.rollouts.len(), "group size differs from rollout_size");
        }
        let breakdowns = score_group_with(&g.rollouts, &weights, &limits)
            .map_err(|e| Failure::Invalid(format!("group {}: {e}", g.group_id)))?;
        out.push(GroupOutput { group_id: g.group_id, breakdowns });
    }
    let n = write_jsonl(&a.out, &out)?;
    print_json(&json!({"groups": n}))
}

fn masks_compile(ctx: &Context, a: MasksCompileArgs) -> Result<(), Failure> {
    let records: Vec<Trajectory> = read_jsonl(&a.dataset)?;
    let limits = ctx.config.pipeline.grammar_limits();
    let mut masks = Vec::new();
    let mut skipped_filtered = 0;
    let mut invalid = Vec::new();
    for t in &records {
        match compile_mask_with(t, &limits) {
            Ok(m) => masks.push(m),
            Err(MaskError::Filtered(_)) => skipped_filtered += 1,
            Err(MaskError::Invalid { id, violations }) => invalid.push(json!({"id": id, "violations": violations})),
        }
    }
    write_jsonl(&a.out, &masks)?;
    print_json(&json!({
        "masks": masks.len(),
        "skipped_filtered": skipped_filtered,
        "invalid": invalid,
        "stats": mask_stats(&masks),
    }))?;
    if invalid.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{} trajectories failed the grammar check", invalid.len())))
    }
}

fn dataset_paths(ctx: &Context, a: &DatasetArgs) -> Result<(PathBuf, PathBuf), Failure> {
    let dataset = a
        .dataset
        .clone()
        .or_else(|| ctx.config.dataset.dataset.clone())
        .ok_or_else(|| Failure::Usage("no dataset: pass --dataset or set dataset.dataset".into()))?;
    if !dataset.is_file() {
        return Err(Failure::Io(format!("{}: no such file", dataset.display())));
    }
    let ledger = a
        .ledger
        .clone()
        .or_else(|| ctx.config.dataset.ledger.clone())
        .unwrap_or_else(|| default_ledger_path(&dataset));
    Ok((dataset, ledger))
}

fn open_dataset(ctx: &Context, a: &DatasetArgs) -> Result<Dataset, Failure> {
    let (dataset, ledger) = dataset_paths(ctx, a)?;
    let ds = Dataset::open(dataset, ledger)?
        .with_required_annotators(ctx.config.review.required_annotators)
        .with_clock(ctx.clock.clone());
    for q in ds.quarantined() {
        warn!(path = %q.display(), "a torn final line was quarantined");
    }
    Ok(ds)
}

fn taxonomy(ctx: &Context) -> Result<Taxonomy, Failure> {
    match &ctx.config.dataset.taxonomy {
        Some(p) => Ok(Taxonomy::load(p)?),
        None => Ok(Taxonomy::default()),
    }
}

fn dataset_stats(ctx: &Context, a: DatasetArgs) -> Result<(), Failure> {
    let ds = open_dataset(ctx, &a)?;
    print_json(&ds.stats(&taxonomy(ctx)?, &ctx.config.dataset.ratio_target))
}

fn dataset_validate(ctx: &Context, a: DatasetArgs) -> Result<(), Failure> {
    let (path, _) = dataset_paths(ctx, &a)?;
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let limits = ctx.config.pipeline.grammar_limits();
    let (mut records, mut problems) = (0usize, Vec::new());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        records += 1;
        match Trajectory::from_json_line(line) {
            Err(e) => problems.push(json!({"line": i + 1, "id": null, "violations": [e.to_string()]})),
            Ok(t) => {
                let report = validate_structure_with(&t, &limits);
                if !report.valid {
                    problems.push(json!({"line": i + 1, "id": t.id, "violations": report.violations}));
                }
            }
        }
    }
    print_json(&json!({"records": records, "invalid": problems.len(), "problems": problems}))?;
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{} of {records} records are invalid", problems.len())))
    }
}

fn dataset_export(ctx: &Context, a: ExportArgs) -> Result<(), Failure> {
    let ds = open_dataset(ctx, &a.source)?;
    let n = ds.export_retained(&a.out, &ctx.config.pipeline.grammar_limits())?;
    print_json(&json!({"exported": n}))
}

fn serve(ctx: &Context, a: ServeArgs) -> Result<(), Failure> {
    let ds = open_dataset(ctx, &a.source)?;
    let review = &ctx.config.review;
    let tokens_file = a
        .tokens_file
        .or_else(|| review.tokens_file.clone())
        .ok_or_else(|| Failure::Usage("no tokens file: pass --tokens-file or set review.tokens_file".into()))?;
    let tokens = Tokens::load(&tokens_file).map_err(Failure::Io)?;
    let mut state = AppState::new(ds, tokens);
    state.images = open_images(a.images.or_else(|| ctx.config.dataset.images.clone()))?;
    state.allow_overwrite = review.allow_overwrite;
    state.taxonomy = taxonomy(ctx)?;
    state.ratio_target = ctx.config.dataset.ratio_target;
    state.image_timeout = std::time::Duration::from_millis(review.image_read_timeout_ms);
    state.ui_dir = a.ui_dir.or_else(|| review.ui_dir.clone());

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Failure::Io(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::Io(e.to_string()))?;
        eprintln!("{}", json!({"listening": local.to_string()}));
        forge_service::serve(listener, Arc::new(state)).await.map_err(|e| Failure::Runtime(e.to_string()))
    })
}
