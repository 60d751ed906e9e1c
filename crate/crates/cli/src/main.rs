use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demopick_cli::commands::{cmd_embed, cmd_predict, cmd_report, cmd_run, cmd_select, StageError};
use demopick_cli::config::{ExperimentConfig, Overrides};
use demopick_core::eval::Metric;
use demopick_core::mock::{HashingEmbedder, MockMode, MockServer};
use demopick_core::select::Method;
use demopick_core::Polarity;

/// Demonstration selection and few-shot evaluation.
#[derive(Parser)]
#[command(name = "demopick", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select, predict and evaluate every (method, seed) cell, then report.
    Run(RunArgs),
    /// Write selection.json for every cell.
    Select(RunArgs),
    /// Fill the embedding cache for the pool and test set.
    Embed(RunArgs),
    /// Predict from selections written by `select`.
    Predict(RunArgs),
    /// Aggregate a finished run directory and rank methods.
    Report {
        /// Run directory (the config's output directory).
        run_dir: PathBuf,
        #[arg(long, default_value = "macro_f1")]
        metric: Metric,
    },
    /// Serve the mock embedding and scoring services over HTTP.
    ServeMock {
        #[arg(long, default_value = "127.0.0.1:8089")]
        bind: String,
        #[arg(long, default_value = "uniform")]
        mode: String,
        /// Separator and label prefix used by copy-last.
        #[arg(long, default_value = "\n\n")]
        separator: String,
        #[arg(long, default_value = "")]
        label_prefix: String,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, env = "DEMOPICK_CONFIG")]
    config: PathBuf,
    /// Restrict the run to one method.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    polarity: Option<Polarity>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Use in-process mock services: uniform[:V], per-token[:LP], length, copy-last.
    #[arg(long)]
    mock: Option<String>,
    #[arg(long)]
    dump_prompts: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            method: self.method,
            k: self.k,
            polarity: self.polarity,
            seed: self.seed,
            mock: self.mock.clone(),
            dump_prompts: self.dump_prompts,
            out: self.out.clone(),
        });
        Ok(cfg)
    }
}

fn stage_err(e: StageError) -> anyhow::Error {
    anyhow::anyhow!("{e}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let out = cmd_run(args.load()?).map_err(stage_err)?;
            for cell in &out.cells {
                println!(
                    "{}\taccuracy={:.4}\tmacro_f1={}",
                    cell.name,
                    cell.report.accuracy,
                    cell.report
                        .macro_f1
                        .map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
            print_ranking(&out.report);
            println!("artifacts in {}", out.out.display());
        }
        Command::Select(args) => {
            for p in cmd_select(args.load()?).map_err(stage_err)? {
                println!("{}", p.display());
            }
        }
        Command::Embed(args) => {
            let out = cmd_embed(args.load()?).map_err(stage_err)?;
            println!(
                "embedded {} texts with {} ({} service requests)",
                out.texts, out.model, out.requests
            );
        }
        Command::Predict(args) => {
            for cell in cmd_predict(args.load()?).map_err(stage_err)? {
                println!("{}\taccuracy={:.4}", cell.name, cell.report.accuracy);
            }
        }
        Command::Report { run_dir, metric } => {
            let out = cmd_report(&run_dir, metric).map_err(stage_err)?;
            print_ranking(&out);
        }
        Command::ServeMock {
            bind,
            mode,
            separator,
            label_prefix,
        } => {
            let mode = MockMode::parse(&mode, &separator, &label_prefix)?;
            let server = MockServer::start(&bind, mode, HashingEmbedder::default())?;
            println!("embed: {}", server.embed_url());
            println!("score: {}", server.score_url());
            server.join();
        }
    }
    Ok(())
}

fn print_ranking(report: &demopick_cli::commands::ReportOutcome) {
    println!("ranking by {}:", report.metric);
    for (i, name) in report.ranking.iter().enumerate() {
        println!("  {}. {name}", i + 1);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}
