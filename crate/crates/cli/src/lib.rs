//! Library side of the `odp` command-line tool.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use odp_core::{CacheConfig, ModelConfig, ScheduleOptions};

pub use commands::Format;
pub use config::{LoadedRun, RunConfig, SEED_ENV};
pub use error::{CliError, CliResult};

/// On-device RNN-T personalization toolkit.
#[derive(Debug, Parser)]
#[command(name = "odp", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the training-cache mini-batch schedule as CSV.
    Schedule(ScheduleArgs),
    /// Break down parameter counts by trainable group.
    CountParams(CountArgs),
    /// Pretrain, personalize and write checkpoints and per-session metrics.
    Train(TrainArgs),
    /// Compare combined and split gradient passes: peaks, recompute cost, equality.
    Bench(BenchArgs),
    /// Check analytic gradients against finite differences and exact oracles.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Window size (examples trained on per session).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub nw: u64,
    /// New examples between sessions.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub ns: u64,
    /// Mini-batch size.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub b: u64,
    /// Epochs per session.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub es: u64,
    /// Examples that arrive in total.
    #[arg(long)]
    pub total: u64,
    /// Emit a single session over all examples when the window never fills.
    #[arg(long)]
    pub allow_partial: bool,
    /// Shuffle each epoch with this seed instead of keeping arrival order.
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Model architecture JSON file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in architecture: full, tiny or tiny-wide.
    #[arg(long, default_value = "full")]
    pub preset: String,
    /// Print only this group, e.g. "Encoder 4-7" or "Decoder".
    #[arg(long)]
    pub group: Option<String>,
    /// Also list each encoder layer on its own.
    #[arg(long)]
    pub per_layer: bool,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding the config's.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Run config JSON; supplies model, group, boundary, batch size and seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "tiny-wide")]
    pub preset: String,
    #[arg(long, default_value = "All")]
    pub group: String,
    /// Encoder layers in the recomputed lower sub-graph. Defaults to half.
    #[arg(long)]
    pub boundary: Option<usize>,
    /// Utterances per batch (ignored with --config, which uses the cache batch size).
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per op kind.
    #[arg(long, default_value_t = 100)]
    pub op_instances: usize,
    /// Random transducer lattices.
    #[arg(long, default_value_t = 1000)]
    pub rnnt_instances: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Schedule(a) => {
            let cache = CacheConfig::new(a.nw as usize, a.ns as usize, a.b as usize, a.es as usize)?;
            let req = commands::ScheduleRequest {
                cache,
                total: a.total as usize,
                options: ScheduleOptions {
                    shuffle_seed: a.shuffle_seed,
                    allow_partial: a.allow_partial,
                },
                out: a.out,
            };
            commands::schedule(&req, out)
        }
        Command::CountParams(a) => {
            let cfg = match &a.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                    serde_json::from_str::<ModelConfig>(&text)
                        .map_err(|e| CliError::Config(format!("invalid model config {}: {e}", path.display())))?
                }
                None => ModelConfig::preset(&a.preset)?,
            };
            commands::count(&cfg, a.group.as_deref(), a.per_layer, a.format, out)
        }
        Command::Train(a) => commands::train(&a.config, a.out, a.jobs as usize, out),
        Command::Bench(a) => {
            let req = commands::BenchRequest {
                config: a.config,
                preset: a.preset,
                group: a.group,
                boundary: a.boundary,
                batch: a.batch,
                seed: a.seed,
            };
            commands::bench(&req, a.out.as_deref(), out)
        }
        Command::Gradcheck(a) => commands::gradcheck(a.op_instances, a.rnnt_instances, a.seed, out).map(|_| ()),
    }
}
