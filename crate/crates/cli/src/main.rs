//! `recl` — run continual-learning experiments, render charts, and run the
//! standalone reconstruction step.
//!
//! Exit codes: 0 success, 1 any failed seed (or runtime error), 2 config
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use recl_core::error::Error;
use recl_core::harness::{
    config_fingerprint, emit_chart, emit_results, parse_config, run_experiment, summarize,
    MPolicy, SummaryFile,
};
use recl_core::model::load_checkpoint;
use recl_core::reconstruction::{reconstruct, write_candidate_dump, ReconHyperparams};
use recl_core::tuning::tune_naive;

#[derive(Parser)]
#[command(name = "recl", version, about = "Continual-learning lab runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        /// Config file (flat `key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list (overrides the config's seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Render a grouped ACC bar chart from one or more summary.json files.
    Chart {
        /// summary.json produced by `recl run`; repeatable.
        #[arg(long, required = true)]
        summary: Vec<PathBuf>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct candidates from a model checkpoint (standalone Step 1).
    Reconstruct {
        /// Model checkpoint written by the lab.
        #[arg(long)]
        model: PathBuf,
        /// Config file supplying the reconstruction hyperparameters.
        #[arg(long)]
        config: PathBuf,
        /// Output candidate dump path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { config, out, seeds } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::io(config.display().to_string(), e))?;
            let mut cfg = parse_config(&text)?;
            if let Some(seeds) = seeds {
                if seeds.is_empty() {
                    return Err(Error::config(0, "seed override must be non-empty"));
                }
                cfg.seeds = seeds;
            }
            if let Some(out) = out {
                cfg.out_dir = out.display().to_string();
            }

            let result = run_experiment(&cfg)?;
            let out_dir = PathBuf::from(&cfg.out_dir);
            let written = emit_results(std::slice::from_ref(&result), &out_dir)?;
            for path in &written {
                println!("wrote {}", path.display());
            }
            let summary = summarize(std::slice::from_ref(&result));
            let entry = &summary.configs[0];
            println!(
                "{} {} recl={} tuning={}: ACC {} BWT {} ({} seeds ok, {} failed)",
                entry.strategy,
                entry.scenario,
                if entry.recl { "on" } else { "off" },
                entry.tuning,
                entry
                    .acc_mean
                    .map_or("n/a".to_string(), |v| format!("{v:.2}")),
                entry
                    .bwt_mean
                    .map_or("n/a".to_string(), |v| format!("{v:.2}")),
                result.seed_runs.len(),
                result.failures.len(),
            );
            for (seed, message) in &result.failures {
                eprintln!("seed {seed} failed: {message}");
            }
            if result.seed_runs.is_empty() || !result.failures.is_empty() {
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Chart { summary, out } => {
            let mut configs = Vec::new();
            for path in &summary {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                let file: SummaryFile = serde_json::from_str(&text).map_err(|e| {
                    Error::parse(0, format!("{}: not a summary file: {e}", path.display()))
                })?;
                configs.extend(file.configs);
            }
            emit_chart(&configs, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Reconstruct { model, config, out } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::io(config.display().to_string(), e))?;
            let cfg = parse_config(&text)?;
            let (params, _spec) = load_checkpoint(&model)?;

            let m = match cfg.recl_m_policy {
                MPolicy::Fixed => cfg.recl_m_fixed,
                // without a task stream there are no per-task counts to sum
                MPolicy::Sum => cfg.recl_m_fixed,
            };
            let base = ReconHyperparams {
                lambda_min: cfg.recl_lambda_min,
                sigma_x: cfg.recl_sigma_x,
                lr_x: cfg.recl_lr_x,
                lr_lambda: cfg.recl_lr_lambda,
                n_rec: cfg.recl_n_rec,
                m,
                alpha: cfg.recl_alpha,
            };
            let hp = tune_naive(&base);
            let targets: Vec<usize> = (0..params.n_classes()).collect();
            let seed = cfg.seeds[0];
            let outcome = reconstruct(&params, &hp, &targets, seed)?;
            write_candidate_dump(&outcome.candidates, &out)?;
            println!(
                "wrote {} ({} candidates, final loss {})",
                out.display(),
                outcome.candidates.len(),
                outcome
                    .final_loss()
                    .map_or("n/a".to_string(), |v| format!("{v:.6}")),
            );
            println!("config fingerprint {}", config_fingerprint(&cfg));
            Ok(ExitCode::SUCCESS)
        }
    }
}
