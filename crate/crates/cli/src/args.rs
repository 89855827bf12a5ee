use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};

/// Build, score and review interleaved image-reasoning trajectories.
#[derive(Debug, Parser)]
#[command(name = "forge", version, propagate_version = true)]
pub struct Cli {
    /// JSON configuration file. Flags override it; it overrides defaults.
    #[arg(long, global = true, env = "FORGE_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for every derived id and mock image.
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    pub seed: u64,

    /// Fixed RFC 3339 timestamp for records and verdicts instead of the wall clock.
    #[arg(long, global = true, value_name = "RFC3339")]
    pub timestamp: Option<String>,

    /// Log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the escalation pipeline over instruction samples.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Score rollout groups.
    #[command(subcommand)]
    Rewards(RewardsCmd),
    /// Compile per-segment loss masks.
    #[command(subcommand)]
    Masks(MasksCmd),
    /// Inspect, check and export datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Serve the review API (and the UI bundle, if present).
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    /// Generate trajectories for each input sample.
    Run(PipelineRunArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("backend").required(true).args(["mock", "live"])))]
pub struct PipelineRunArgs {
    /// Input JSONL: {"instruction": ..., "references"?: [...], "category"?: ...} per line.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Output trajectory JSONL (overwritten).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Use the offline scripted Analyzer/Generator.
    #[arg(long)]
    pub mock: bool,
    /// Use the configured HTTP endpoints.
    #[arg(long)]
    pub live: bool,
    /// Maximum samples in flight.
    #[arg(long, default_value_t = 1, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    pub parallel: u32,
    /// Also write batch statistics JSON to this file.
    #[arg(long, value_name = "PATH")]
    pub stats: Option<PathBuf>,
    /// Image store directory for generated images.
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RewardsCmd {
    /// Compute reward breakdowns and advantages per group.
    Score(RewardsScoreArgs),
}

#[derive(Debug, Args)]
pub struct RewardsScoreArgs {
    /// Input JSONL: {"group_id": ..., "rollouts": [...]} per line.
    #[arg(long, value_name = "PATH")]
    pub group: PathBuf,
    /// Output JSONL: {"group_id": ..., "breakdowns": [...]} per line.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum MasksCmd {
    /// Compile masks for every non-filtered trajectory.
    Compile(MasksCompileArgs),
}

#[derive(Debug, Args)]
pub struct MasksCompileArgs {
    /// Trajectory JSONL.
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    /// Output mask JSONL.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Print mode, category and verification counts with the ratio report.
    Stats(DatasetArgs),
    /// Check every record against the trajectory grammar.
    Validate(DatasetArgs),
    /// Write retained trajectories to a file.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Trajectory JSONL.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Verification ledger JSONL (default: <dataset stem>.ledger.jsonl).
    #[arg(long, value_name = "PATH")]
    pub ledger: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub source: DatasetArgs,
    /// Output JSONL of retained trajectories.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Port to listen on.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[command(flatten)]
    pub source: DatasetArgs,
    /// JSON file mapping bearer tokens to annotator ids.
    #[arg(long, value_name = "PATH")]
    pub tokens_file: Option<PathBuf>,
    /// Image store directory.
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Built UI bundle served at /.
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
}
