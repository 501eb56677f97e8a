//! `deskrl` — command-line harness for the token-MDP RL lab.
//!
//! Verbs:
//!   run      execute a configured experiment (or the acceptance suite)
//!   compare  cross-run report: steps-to-target, final accuracy, KL-matched accuracy
//!   analyze  emit the figure-analogue CSV tables for a run directory
//!   replay   re-evaluate a checkpoint on a task file
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 training divergence
//! (artifacts preserved), 1 anything else. Failures also print a
//! machine-readable JSON record on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deskrl_core::config::{preset_names, ExperimentConfig};
use deskrl_core::error::Error;
use deskrl_core::runner;

#[derive(Parser)]
#[command(name = "deskrl", version, about = "desk-scale RL lab for token MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment or the acceptance suite.
    Run(RunArgs),
    /// Compare two or more finished runs.
    Compare(CompareArgs),
    /// Write analysis CSV tables for a run directory.
    Analyze(AnalyzeArgs),
    /// Re-evaluate a checkpoint on a task file.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Built-in preset name or path to a TOML config.
    #[arg(long, conflicts_with = "suite")]
    config: Option<String>,
    /// Named suite to execute (only "acceptance").
    #[arg(long)]
    suite: Option<String>,
    /// Restrict the suite to criteria whose id contains this string.
    #[arg(long, requires = "suite")]
    filter: Option<String>,
    /// Run only this seed (default: every seed in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: runs/<config-name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set ppo.mc_k=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue an interrupted run from its last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Worker threads (0 = one per core; 1 = strictly single-threaded).
    #[arg(long)]
    workers: Option<usize>,
    /// List available presets and exit.
    #[arg(long)]
    list_presets: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more run directories (seed dirs or their parents).
    dirs: Vec<PathBuf>,
    /// Target accuracy for steps-to-target (default: from the configs).
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    dir: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 0.35)]
    temperature: f64,
    #[arg(long, default_value_t = 16)]
    rounds: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generation cap (default: 2n + 2 for the task file's difficulty).
    #[arg(long)]
    max_length: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            let kind = match &err {
                Error::Config(_) => "config",
                Error::Diverged(_) => "diverged",
                Error::Contract(_) => "contract",
                Error::OracleUnavailable(_) => "oracle_unavailable",
                Error::Artifact(_) => "artifact",
                Error::Io(_) => "io",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.to_string(), "kind": kind })
            );
            match err {
                Error::Config(_) => ExitCode::from(2),
                Error::Diverged(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => {
            let report = runner::compare_runs(&args.dirs, args.target)?;
            print!("{report}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze(args) => {
            let written = runner::analyze_run(&args.dir)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay(args) => {
            let report = runner::replay(
                &args.checkpoint,
                &args.tasks,
                args.max_length,
                args.temperature,
                args.rounds,
                args.seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report"));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run(args: RunArgs) -> Result<ExitCode, Error> {
    if args.list_presets {
        for name in preset_names() {
            println!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(workers) = args.workers {
        runner::init_worker_pool(workers);
    }

    if let Some(suite) = &args.suite {
        if suite != "acceptance" {
            return Err(Error::Config(format!(
                "unknown suite {suite:?}; available: acceptance"
            )));
        }
        let work_dir = args
            .out
            .unwrap_or_else(|| PathBuf::from("runs/acceptance"));
        let results = deskrl_core::acceptance::run_suite(&work_dir, args.filter.as_deref())?;
        let mut all_pass = true;
        for r in &results {
            println!("{}", r.line());
            all_pass &= r.passed;
        }
        println!(
            "{}/{} criteria passed",
            results.iter().filter(|r| r.passed).count(),
            results.len()
        );
        return Ok(if all_pass {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        });
    }

    let name = args
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("run needs --config <preset|path> or --suite".into()))?;
    let mut cfg = ExperimentConfig::resolve(name)?;
    for assignment in &args.overrides {
        cfg = cfg.with_override(assignment)?;
    }
    cfg = cfg.with_env_overrides(std::env::vars())?;
    if args.workers.is_none() {
        runner::init_worker_pool(cfg.run.workers);
    }

    let stem = PathBuf::from(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string());
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs").join(stem));

    let summaries = runner::execute(&cfg, &out, args.seed, args.resume)?;
    for s in &summaries {
        println!("{}", serde_json::to_string(s).expect("summary"));
    }
    println!("run complete: {}", out.display());
    Ok(ExitCode::SUCCESS)
}
