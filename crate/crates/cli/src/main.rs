//! `adavip` command-line driver.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime
//! errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adavip::config::RunConfig;
use adavip::eval::{self, EvalReport};
use adavip::policy::{load_checkpoint, save_checkpoint};
use adavip::scene_world::{read_dataset, removed_histogram, write_dataset};
use adavip::trainer::{self, project_columns, Strategy, DYNAMICS_COLUMNS};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "adavip", version, about = "Vision-enhanced preference optimization on a synthetic scene world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed used by the command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, captions and vision-rejected images as JSON lines.
    BuildPairs {
        #[command(flatten)]
        common: Common,
        /// Output dataset path (defaults to `dataset_path`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run preference optimization; writes checkpoint.json and dynamics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset produced by build-pairs (defaults to `dataset_path`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory (defaults to `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Evaluate a checkpoint on held-out scenes and print a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit selected columns of a dynamics CSV.
    Dynamics {
        /// Dynamics CSV written by `train`.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated column names (default: all).
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn print_config(cfg: &RunConfig) {
    for line in cfg.to_kv_lines() {
        println!("# {line}");
    }
}

fn build_pairs(common: Common, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.dataset_seed = seed;
    }
    if let Some(out) = out {
        cfg.dataset_path = out;
    }
    let world = cfg.build_world()?;
    let records = world.generate_dataset(cfg.dataset_size, cfg.dataset_seed)?;
    write_dataset(&cfg.dataset_path, world.vocab(), &records, &cfg.to_json())
        .with_context(|| format!("writing {}", cfg.dataset_path.display()))?;
    print_config(&cfg);
    println!("records={}", records.len());
    for (category, count) in removed_histogram(world.vocab(), &records) {
        println!("removed {category} {count}");
    }
    Ok(())
}

fn train(common: Common, dataset: Option<PathBuf>, out: Option<PathBuf>, strategy: Option<Strategy>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(strategy) = strategy {
        cfg.train.strategy = strategy;
    }
    if let Some(dataset) = dataset {
        cfg.dataset_path = dataset;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let world = cfg.build_world()?;
    let (records, _) =
        read_dataset(&cfg.dataset_path, &world).with_context(|| format!("reading {}", cfg.dataset_path.display()))?;
    let result = trainer::train(&cfg.train, &world, &records)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    save_checkpoint(&cfg.out_dir.join("checkpoint.json"), &result.params, &cfg.to_json())?;
    result.log.write_csv(&cfg.out_dir.join("dynamics.csv"), &cfg.to_kv_lines())?;
    print_config(&cfg);
    println!("steps={}", result.log.len());
    if let Some(last) = result.log.rows.last() {
        let s = &last.stats;
        println!("final loss={} r_pp={} r_pm={} r_mp={} w_pm={} w_mp={}", s.loss, s.r_pp, s.r_pm, s.r_mp, s.w_pm, s.w_mp);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    effective_config: serde_json::Value,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn evaluate(common: Common, checkpoint: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.eval.seed = seed;
    }
    let world = cfg.build_world()?;
    let (params, _) = load_checkpoint(&checkpoint)?;
    let report = eval::evaluate(&params, &world, &cfg.eval)?;
    let mut text = serde_json::to_string_pretty(&EvalOutput {
        effective_config: json!({ "config": cfg.to_json(), "checkpoint": checkpoint.display().to_string() }),
        report: &report,
    })?;
    text.push('\n');
    if let Some(out) = out {
        fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

fn dynamics(input: PathBuf, columns: Vec<String>, out: Option<PathBuf>) -> Result<()> {
    let csv = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let columns: Vec<&str> = if columns.is_empty() {
        DYNAMICS_COLUMNS.to_vec()
    } else {
        columns.iter().map(String::as_str).collect()
    };
    let text = project_columns(&csv, &columns)?;
    match out {
        Some(out) => fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<adavip::Error>() {
        Some(adavip::Error::Config(_) | adavip::Error::InvalidBeta(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildPairs { common, out } => build_pairs(common, out),
        Command::Train { common, dataset, out, strategy } => train(common, dataset, out, strategy),
        Command::Eval { common, checkpoint, out } => evaluate(common, checkpoint, out),
        Command::Dynamics { input, columns, out } => dynamics(input, columns, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
