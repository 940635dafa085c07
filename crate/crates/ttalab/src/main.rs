//! Command-line entry point: `run` executes a configured experiment over its
//! seeds; `compare` aggregates previously written reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 validation failure (clap also
//! exits 2 on bad usage).

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use ttalab::adapt::Method;
use ttalab::config::{ExperimentConfig, NormName};
use ttalab::runner::{compare, run, RunError};
use ttalab::shiftgen::CorruptionKind;
use ttalab::telemetry::read_report_json;

#[derive(Parser)]
#[command(name = "ttalab", version, about = "Test-time adaptation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment (one run per seed) and write traces + reports.
    Run(RunArgs),
    /// Summarize report JSONs into a per-method comparison table.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags below override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// noadapt | tent | sar | clip_value | clip_norm
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// bn | gn | ln
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormName>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// q_max/q_min for online label shift; accepts "inf".
    #[arg(long, value_parser = parse_ratio)]
    imbalance_ratio: Option<f64>,
    /// Corruption severity 1..=5.
    #[arg(long)]
    severity: Option<u8>,
    /// Mix all corruption kinds within the stream.
    #[arg(long)]
    mix: bool,
    /// Comma-separated seed list, e.g. --seeds 0,1,2.
    #[arg(long, alias = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory (default: config value, then $TTALAB_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model checkpoint: loaded as-is, or written when --pretrain is set.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pretrain from scratch even when a checkpoint path is given.
    #[arg(long)]
    pretrain: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Report JSON files produced by `run`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Optional path for the machine-readable summary JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        format!("unknown method {s:?}; expected noadapt, tent, sar, clip_value, or clip_norm")
    })
}

fn parse_norm(s: &str) -> Result<NormName, String> {
    NormName::parse(s).ok_or_else(|| format!("unknown norm {s:?}; expected bn, gn, or ln"))
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    if s.trim().eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    s.parse::<f64>()
        .map_err(|_| format!("imbalance ratio must be a number or \"inf\", got {s:?}"))
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(method) = args.method {
        cfg.adapt.method = method;
    }
    if let Some(norm) = args.norm {
        cfg.model.norm = norm;
    }
    if let Some(batch_size) = args.batch_size {
        cfg.stream.batch_size = batch_size;
    }
    if let Some(ratio) = args.imbalance_ratio {
        cfg.stream.imbalance_ratio = ratio;
    }
    if let Some(severity) = args.severity {
        cfg.stream.severity = severity;
    }
    if args.mix {
        cfg.stream.kinds = CorruptionKind::ALL.to_vec();
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(ckpt) = &args.checkpoint {
        cfg.model.checkpoint = Some(ckpt.clone());
        // A checkpoint given on the command line is loaded unless --pretrain
        // explicitly asks to (re)train and overwrite it.
        cfg.model.pretrain = args.pretrain;
    } else if args.pretrain {
        cfg.model.pretrain = true;
    }
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<(), RunError> {
    let cfg = build_config(args)?;
    let outputs = run(&cfg)?;
    for o in &outputs {
        println!(
            "{} norm={} seed={} accuracy={:.4} updates={} backwards={} recoveries={} collapse={} ({:.1}s) -> {}",
            o.report.method,
            o.report.norm,
            o.report.seed,
            o.report.final_accuracy,
            o.report.update_count,
            o.report.backward_count,
            o.report.recovery_count,
            o.report.collapse,
            o.report.duration_seconds,
            o.report_path.display(),
        );
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), RunError> {
    let mut reports = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        reports.push(read_report_json(path).map_err(|e| RunError::Runtime(e.to_string()))?);
    }
    let summary = compare(&reports)?;
    print!("{}", summary.render());
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| RunError::Runtime(e.to_string()))?;
        std::fs::write(out, json)
            .map_err(|e| RunError::Runtime(format!("cannot write {}: {e}", out.display())))?;
        println!("summary written to {}", out.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
