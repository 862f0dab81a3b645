//! `hksl`: train agents, run the ablation grid, aggregate run records and
//! run the post-training analyses.

mod commands;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "hksl", version, about = "Hierarchical k-step latent agents on toy pixel tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the overrides shared by `train` and `ablate`.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override `total_steps`.
    #[arg(long)]
    pub total_steps: Option<u64>,
    /// Override `eval_every`.
    #[arg(long)]
    pub eval_every: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one (config, seed) run and write its record and checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation variant (full, no_repr, all_n1, no_c, shared_encoder, h1).
        #[arg(long)]
        ablation: Option<String>,
        /// Run directory; defaults to `<out>/<ablation>/seed<seed>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, env = "HKSL_OUT_DIR", default_value = "runs")]
        out: PathBuf,
    },
    /// Train all six ablation variants for every seed.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        seeds: Vec<u64>,
        #[arg(long, env = "HKSL_OUT_DIR", default_value = "runs")]
        out: PathBuf,
        /// Concurrent runs; defaults to the number of CPUs.
        #[arg(long, env = "HKSL_WORKERS")]
        workers: Option<usize>,
    },
    /// Evaluate a trained run's checkpoint on fresh episodes.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Seed for the evaluation episode seeds.
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
    /// IQM, optimality gap and mean with bootstrap intervals over run records.
    Stats {
        /// Record files, directories (searched for record.jsonl) or glob patterns.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value_t = hksl::evalstats::DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = hksl::evalstats::DEFAULT_LEVEL)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "stats.csv")]
        output: PathBuf,
    },
    /// Linear-probe each level's rollout latents against ball and cup positions.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 40)]
        fit_episodes: usize,
        #[arg(long, default_value_t = 20)]
        eval_episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "probe.csv")]
        output: PathBuf,
    },
    /// Distance matrix and PCA of communication-manager outputs.
    Commanalysis {
        #[arg(long)]
        run: PathBuf,
        /// Episodes recorded with the trained policy to sample windows from.
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 100)]
        trajectories: usize,
        #[arg(long, default_value_t = 20)]
        pca_trajectories: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for distance.csv, pca.csv and pca_variance.csv.
        #[arg(long, default_value = "commanalysis")]
        output: PathBuf,
    },
    /// Bundle CSVs and draw the IQM-over-training chart from a stats CSV.
    Report {
        /// CSV files to bundle; the one with the stats header is charted.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            ablation,
            run_dir,
            out,
        } => commands::train(&config, seed, ablation.as_deref(), run_dir, &out),
        Command::Ablate {
            config,
            seeds,
            out,
            workers,
        } => commands::ablate(&config, &seeds, &out, workers),
        Command::Eval { run, episodes, seed } => commands::eval(&run, episodes, seed),
        Command::Stats {
            inputs,
            resamples,
            level,
            seed,
            output,
        } => commands::stats(&inputs, resamples, level, seed, &output),
        Command::Probe {
            run,
            fit_episodes,
            eval_episodes,
            seed,
            output,
        } => commands::probe(&run, fit_episodes, eval_episodes, seed, &output),
        Command::Commanalysis {
            run,
            episodes,
            trajectories,
            pca_trajectories,
            seed,
            output,
        } => commands::commanalysis(&run, episodes, trajectories, pca_trajectories, seed, &output),
        Command::Report { inputs, output } => commands::report(&inputs, &output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
