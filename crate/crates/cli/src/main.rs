use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vdc_cli::{
    cmd_embed, cmd_eval, cmd_generate, cmd_select_k, cmd_stability, cmd_train, emit_json, exit_code, parse_k_range,
    render_select_k, SplitChoice,
};
use vdc_core::metrics::DEFAULT_IMPORTANCE_SAMPLES;
use vdc_core::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "vdc", version, about = "Variational deep clustering with a mixture-of-Gaussians prior")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (train) or file (other commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Projection {
    #[value(name = "2d")]
    TwoD,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train,
    /// Score the latest checkpoint of a run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint step; defaults to the latest.
        #[arg(long)]
        step: Option<u64>,
        /// Defaults to `test` when the config defines a split, else `all`.
        #[arg(long, value_enum)]
        split: Option<SplitChoice>,
        #[arg(long, default_value_t = DEFAULT_IMPORTANCE_SAMPLES)]
        importance_samples: usize,
    },
    /// Train one model per cluster count and compare `-ln p(x)`.
    SelectK {
        /// Inclusive range such as `2..8`.
        #[arg(long)]
        k_range: String,
        #[arg(long, default_value_t = DEFAULT_IMPORTANCE_SAMPLES)]
        importance_samples: usize,
    },
    /// Sample from the learned generative model.
    Generate {
        #[arg(long)]
        run: PathBuf,
        /// Restrict sampling to one mixture component.
        #[arg(long)]
        cluster: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Export latent embeddings and cluster assignments as CSV.
    Embed {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        project: Option<Projection>,
        /// Scatter-plot path; defaults to the CSV path with a `.png` extension.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Repeat training over several seeds and report mean and spread.
    Stability {
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Give every trial the base seed instead of consecutive seeds.
        #[arg(long)]
        same_seed: bool,
        #[arg(long, default_value_t = DEFAULT_IMPORTANCE_SAMPLES)]
        importance_samples: usize,
    },
}

fn require_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("this command needs --config <path>")?;
    Ok(RunConfig::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let config = require_config(&cli)?;
            let summary = cmd_train(config, cli.seed, cli.out.clone())?;
            emit_json(&summary, None)
        }
        Command::Eval {
            run,
            step,
            split,
            importance_samples,
        } => {
            let report = cmd_eval(run, *step, *split, *importance_samples, cli.seed.unwrap_or(0))?;
            emit_json(&report, cli.out.as_deref())
        }
        Command::SelectK {
            k_range,
            importance_samples,
        } => {
            let config = require_config(&cli)?;
            let range = parse_k_range(k_range)?;
            let report = cmd_select_k(config, range, cli.seed, *importance_samples)?;
            eprint!("{}", render_select_k(&report));
            emit_json(&report, cli.out.as_deref())
        }
        Command::Generate { run, cluster, count } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("generated.csv"));
            let summary = cmd_generate(run, *cluster, *count, cli.seed.unwrap_or(0), &out)?;
            emit_json(&summary, None)
        }
        Command::Embed { run, project, plot } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("embedding.csv"));
            let summary = cmd_embed(run, &out, project.is_some(), plot.as_deref())?;
            emit_json(&summary, None)
        }
        Command::Stability {
            trials,
            same_seed,
            importance_samples,
        } => {
            let config = require_config(&cli)?;
            let output = cmd_stability(config, *trials, cli.seed, *same_seed, *importance_samples, cli.out.as_deref())?;
            emit_json(&output, None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
