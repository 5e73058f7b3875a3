//! `topicgrowth` command-line interface.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{Ctx, PipelineOptions};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "topicgrowth", version, about = "Matched event-study analysis of topic growth")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for matching, placebo draws, cross-validation and generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic panel with known planted effects.
    Synth {
        /// Generator spec (TOML); defaults to the config's [synth] table.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also write funding and scientist-topic edge files.
        #[arg(long)]
        extras: bool,
    },
    /// Match treated topics to peers and report balance.
    Match {
        /// Forbid a peer from serving more than one treated topic.
        #[arg(long)]
        no_replacement: bool,
    },
    /// Gap series and summary effects.
    Effects,
    /// Difference-in-differences regressions.
    Did,
    /// Placebo run on relabeled peers.
    Placebo,
    /// Signal-strength regressions with BIC and cross-validation.
    Signal,
    /// Sign tests and optional diversity, overlap and funding diagnostics.
    Diagnostics,
    /// Every stage in order; generates the panel first when a spec is set.
    Pipeline {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Generate auxiliary inputs and run the diagnostics that use them.
        #[arg(long)]
        extras: bool,
        /// Slope of the synthetic entrant-diversity relation.
        #[arg(long, default_value_t = 0.38)]
        diversity_slope: f64,
        #[arg(long)]
        no_replacement: bool,
    },
}

fn resolve(cli: &Cli) -> Result<Ctx, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    Ok(Ctx {
        cfg,
        seed_flag: cli.seed.is_some(),
    })
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = resolve(cli)?;
    if ctx.cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(ctx.cfg.threads)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth { spec, extras } => commands::synth(&ctx, spec.as_deref(), *extras).map(|_| ()),
        Command::Match { no_replacement } => commands::match_cmd(&ctx, *no_replacement),
        Command::Effects => commands::effects(&ctx),
        Command::Did => commands::did_cmd(&ctx),
        Command::Placebo => commands::placebo_cmd(&ctx),
        Command::Signal => commands::signal_cmd(&ctx),
        Command::Diagnostics => commands::diagnostics(&ctx),
        Command::Pipeline {
            spec,
            extras,
            diversity_slope,
            no_replacement,
        } => commands::pipeline(
            &ctx,
            &PipelineOptions {
                spec: spec.as_deref(),
                extras: *extras,
                diversity_slope: *diversity_slope,
                no_replacement: *no_replacement,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    // A panic is an internal error, not an input problem.
    let outcome = std::panic::catch_unwind(|| run(&cli)).unwrap_or_else(|_| Err(CliError::Internal("internal error".into())));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
