//! `cloudcast`: the experiment pipeline from raw events to summary reports.

mod bench;
mod config;
mod data;
mod evaluate;
mod experiments;
mod layout;
mod report;

use std::path::PathBuf;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};

use cloudcast::models::{IntervalSide, ModelKind};
use cloudcast::scenarios::Scenario;

use config::{parse_list, RunConfig};
use layout::Context;

#[derive(Debug, Parser)]
#[command(name = "cloudcast", version, about = "Probabilistic cloud demand forecasting experiments")]
struct Cli {
    /// Directory holding data and experiment outputs.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Recompute steps whose outputs already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; 0 uses every core. `CLOUDCAST_DETERMINISTIC=1` forces 1.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Narrowing of the configured job grid.
#[derive(Debug, Clone, clap::Args)]
struct JobArgs {
    /// Comma-separated scenarios, e.g. `ALL,ALL_BUT_ONE_FT`.
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated target clusters.
    #[arg(long)]
    target_cluster: Option<String>,
    /// Comma-separated models: lstm, lstmd, hbnn.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated prediction modes, e.g. `cpu,bivariate`.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seed_list: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Aggregate a usage-event CSV into a five-minute trace.
    Preprocess {
        /// Event CSV.
        #[arg(long)]
        events: PathBuf,
        /// Cluster id of the resulting trace.
        #[arg(long)]
        cluster: String,
        /// Column layout: canonical, google2019, google2011 or alibaba2018.
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long, default_value_t = data::default_window())]
        window_seconds: u64,
        /// Start of the first window (seconds); the first event when absent.
        #[arg(long)]
        start: Option<i64>,
        /// End of the last window (seconds); the last event when absent.
        #[arg(long)]
        end: Option<i64>,
    },
    /// Generate the configured synthetic traces.
    Synth,
    /// Scale, window and split every trace for every mode.
    Split,
    /// Train single-cluster models (the RANDOM scenario).
    Train(JobArgs),
    /// Run transfer-learning scenarios.
    Scenario(JobArgs),
    /// Random hyperparameter search over the configured space.
    Search(JobArgs),
    /// Score every completed run and run pairwise DM tests.
    Evaluate {
        /// Comma-separated confidence levels in percent.
        #[arg(long)]
        confidence: Option<String>,
        /// `one-sided` or `two-sided` upper bounds.
        #[arg(long)]
        interval: Option<String>,
    },
    /// Time training, fine-tuning and inference.
    Bench,
    /// Aggregate metrics into summary tables and plots.
    Report {
        /// Accept runs produced by different model configurations.
        #[arg(long)]
        allow_mixed: bool,
    },
}

fn selection(args: &JobArgs) -> Result<experiments::Selection> {
    let scenarios = args
        .scenario
        .as_deref()
        .map(|s| {
            parse_list::<String>(s)?
                .iter()
                .map(|x| Scenario::parse(x).with_context(|| format!("unknown scenario `{x}`")))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let models = args
        .model
        .as_deref()
        .map(|s| {
            parse_list::<String>(s)?
                .iter()
                .map(|x| ModelKind::parse(x).with_context(|| format!("unknown model `{x}`")))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(experiments::Selection {
        scenarios,
        targets: args.target_cluster.as_deref().map(parse_list).transpose()?,
        models,
        modes: args.mode.as_deref().map(parse_list).transpose()?,
        seeds: args.seed_list.as_deref().map(parse_list).transpose()?,
    })
}

fn parse_side(s: &str) -> Result<IntervalSide> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "one-sided" | "one" => Ok(IntervalSide::OneSided),
        "two-sided" | "two" => Ok(IntervalSide::TwoSided),
        other => anyhow::bail!("interval must be `one-sided` or `two-sided`, got `{other}`"),
    }
}

fn jobs(requested: usize) -> usize {
    let deterministic = std::env::var("CLOUDCAST_DETERMINISTIC").is_ok_and(|v| !v.is_empty() && v != "0");
    if deterministic {
        1
    } else if requested == 0 {
        cloudcast::par::current_threads()
    } else {
        requested
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let ctx = Context {
        workdir: cli.workdir,
        config,
        force: cli.force,
        jobs: jobs(cli.jobs),
    };
    match &cli.command {
        Command::Config => println!("{}", serde_json::to_string_pretty(&ctx.config)?),
        Command::Preprocess {
            events,
            cluster,
            adapter,
            window_seconds,
            start,
            end,
        } => data::preprocess(
            &ctx,
            &data::PreprocessArgs {
                events,
                cluster,
                adapter: adapter.as_deref(),
                window_seconds: *window_seconds,
                start: *start,
                end: *end,
            },
        )?,
        Command::Synth => data::synth(&ctx)?,
        Command::Split => data::split_all(&ctx)?,
        Command::Train(args) => {
            experiments::train(&ctx, &selection(args)?)?;
        }
        Command::Scenario(args) => {
            experiments::scenarios(&ctx, &selection(args)?)?;
        }
        Command::Search(args) => experiments::search(&ctx, &selection(args)?)?,
        Command::Evaluate { confidence, interval } => {
            let settings = evaluate::EvalSettings {
                confidence: match confidence {
                    Some(c) => parse_list(c)?,
                    None => ctx.config.confidence.clone(),
                },
                side: match interval {
                    Some(s) => parse_side(s)?,
                    None => ctx.config.interval,
                },
            };
            evaluate::evaluate(&ctx, &settings)?
        }
        Command::Bench => bench::bench(&ctx)?,
        Command::Report { allow_mixed } => report::report(&ctx, *allow_mixed)?,
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
