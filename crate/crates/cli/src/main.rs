use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use snnq_cli::commands::{self, resolve_bits};
use snnq_cli::config::{parse_bits, RunConfig};
use snnq_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "snnq", version, about = "Train, analyse and quantize spiking networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration, TOML or `.json`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Full-precision training.
    Train,
    /// Per-layer Hessian traces of a checkpoint.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Quantize a checkpoint and fine-tune it.
    QuantizeFinetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Weight widths per layer, e.g. `8,8,16`.
        #[arg(long)]
        bits: Option<String>,
        /// State width for every layer.
        #[arg(long)]
        state_bits: Option<u32>,
    },
    /// Rank bit configurations under a size budget.
    Allocate {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        budget_mb: Option<f64>,
        /// Candidate widths, e.g. `8,16`.
        #[arg(long)]
        menu: Option<String>,
    },
    /// Test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Combine run records into tables.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train => {
            let rec = commands::cmd_train(&load_config(&cli.common)?)?;
            println!("accuracy {:?}", rec.accuracies);
        }
        Command::Trace { checkpoint } => {
            let rec = commands::cmd_trace(&load_config(&cli.common)?, &checkpoint)?;
            for t in rec.traces.unwrap_or_default() {
                println!(
                    "L{} trace {:e} +- {:e}",
                    t.layer + 1,
                    t.estimate.mean,
                    t.estimate.std_err
                );
            }
        }
        Command::QuantizeFinetune {
            checkpoint,
            bits,
            state_bits,
        } => {
            let cfg = load_config(&cli.common)?;
            let weight_bits = bits.as_deref().map(parse_bits).transpose()?;
            let bits = resolve_bits(&cfg, weight_bits.as_deref(), state_bits)?;
            let rec = commands::cmd_quantize_finetune(&cfg, &checkpoint, &bits)?;
            println!(
                "accuracy before {:?} after {:?}",
                rec.accuracies_before.unwrap_or_default(),
                rec.accuracies
            );
        }
        Command::Allocate {
            traces,
            budget_mb,
            menu,
        } => {
            let cfg = load_config(&cli.common)?;
            let section = cfg.allocate.clone();
            let budget = budget_mb
                .or(section.as_ref().map(|a| a.budget_mb))
                .ok_or_else(|| CliError::Config("no budget: give --budget-mb or [allocate]".into()))?;
            let menu = match menu {
                Some(m) => parse_bits(&m)?,
                None => section
                    .map(|a| a.menu)
                    .ok_or_else(|| CliError::Config("no menu: give --menu or [allocate]".into()))?,
            };
            let ranked = commands::cmd_allocate(&cfg, &traces, budget, &menu)?;
            for r in ranked.iter().take(5) {
                println!(
                    "{:?} {:.2} MB sensitivity {:e}",
                    r.bits,
                    r.size.display_mb(),
                    r.sensitivity
                );
            }
        }
        Command::Eval { checkpoint } => {
            let rec = commands::cmd_eval(&load_config(&cli.common)?, &checkpoint)?;
            println!("accuracy {:?}", rec.accuracies);
        }
        Command::Report { records } => {
            let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let report = commands::cmd_report(&records, &out)?;
            println!(
                "{} records, {} bit rows, {} trace rows",
                report.n_records,
                report.bits_table.len(),
                report.trace_table.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
