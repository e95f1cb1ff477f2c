//! `picanet`: train, run and inspect the saliency detector.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration,
//! 2 for numeric failures (non-finite values, failed gradient checks).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CommandKind, Overrides, RunConfig};

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Placement string, one of G/L/N per decoding module, deepest first (e.g. GGLLN).
    #[arg(long, global = true)]
    placement: Option<String>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory or `synthetic:<seed>:<n>`.
    #[arg(long, global = true)]
    data: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints plus a JSONL log.
    Train,
    /// Write one saliency PNG per input image.
    Infer,
    /// Score predictions against ground truth (or a checkpoint on a dataset).
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Finite-difference certification of every backward rule.
    Gradcheck {
        /// Number of consecutive seeds, starting at --seed.
        #[arg(long)]
        seeds: Option<usize>,
        /// Corrupt this op's backward rule (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Export attention maps of chosen pixels.
    Attnviz {
        /// PNG path or `synthetic:<seed>:<index>`.
        #[arg(long)]
        image: Option<String>,
        /// Query pixel `x,y`; repeatable.
        #[arg(long = "pixel", value_parser = parse_pixel)]
        pixels: Vec<(usize, usize)>,
    },
}

#[derive(Parser)]
#[command(name = "picanet", version, about = "Pixel-wise contextual attention saliency detector")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("`{s}` is not x,y"))?;
    Ok((x.trim().parse().map_err(|_| format!("bad x in `{s}`"))?, y.trim().parse().map_err(|_| format!("bad y in `{s}`"))?))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = cli.common;
    let overrides = Overrides { seed: c.seed, placement: c.placement, steps: c.steps, out: c.out, data: c.data, checkpoint: c.checkpoint };
    let kind = match &cli.command {
        Command::Train => CommandKind::Train,
        Command::Infer => CommandKind::Infer,
        Command::Eval { .. } => CommandKind::Eval,
        Command::Gradcheck { .. } => CommandKind::Gradcheck,
        Command::Attnviz { .. } => CommandKind::Attnviz,
    };
    let mut cfg = RunConfig::resolve(kind, c.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Infer => commands::infer(&cfg),
        Command::Eval { predictions, ground_truth } => {
            cfg.predictions = predictions.or(cfg.predictions);
            cfg.ground_truth = ground_truth.or(cfg.ground_truth);
            commands::eval(&cfg)
        }
        Command::Gradcheck { seeds, fault } => {
            if let Some(n) = seeds {
                cfg.gradcheck_seeds = n;
            }
            // the tape keys faults by op name; one leak per process
            let fault: Option<&'static str> = fault.map(|op| &*Box::leak(op.into_boxed_str()));
            commands::gradcheck(&cfg, fault)
        }
        Command::Attnviz { image, pixels } => {
            cfg.image = image.or(cfg.image);
            if !pixels.is_empty() {
                cfg.pixels = pixels;
            }
            commands::attnviz(&cfg)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::GradcheckFailed>().is_some() {
        return 2;
    }
    match err.downcast_ref::<picanet_core::Error>() {
        Some(picanet_core::Error::Numeric { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
