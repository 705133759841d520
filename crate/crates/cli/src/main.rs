use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxssl::commands::{self, CellStatus, TrainOptions};
use ctxssl::config::parse_overrides;
use ctxssl::{Result, RunConfig};

/// Context-conditioned self-supervised learning on a synthetic world.
#[derive(Parser)]
#[command(name = "ctxssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write it to `paths.out_dir`.
    GenWorld(Common),
    /// Train a model; `--resume` continues from the checkpoint.
    Train(Common),
    /// Evaluate a checkpoint over the configured context lengths.
    Eval(Common),
    /// Sweep mask probability and predictor weight, one train+eval per cell.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides as `--key value` or `--section.key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn resolve(c: &Common, flags: &[&str]) -> Result<(RunConfig, Vec<String>)> {
    let mut pairs = parse_overrides(&c.overrides)?;
    let mut set = Vec::new();
    pairs.retain(|(k, v)| {
        if flags.contains(&k.as_str()) {
            if v != "false" {
                set.push(k.clone());
            }
            false
        } else {
            true
        }
    });
    Ok((RunConfig::resolve(&c.config, &pairs)?, set))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld(c) => {
            let (cfg, _) = resolve(&c, &[])?;
            let s = commands::gen_world(&cfg)?;
            let wc = s.world.config();
            println!(
                "world {} ({} objects, {} classes, obs_dim {}, seed {}) sha256 {}",
                s.path.display(),
                wc.n_classes * wc.objects_per_class,
                wc.n_classes,
                wc.obs_dim,
                wc.seed,
                s.sha256
            );
        }
        Command::Train(c) => {
            let (cfg, flags) = resolve(&c, &["resume"])?;
            let opts = TrainOptions {
                resume: !flags.is_empty(),
                progress_every: 100,
            };
            let o = commands::train(&cfg, opts)?;
            println!(
                "checkpoint {} ({})",
                o.checkpoint.display(),
                o.manifest.id()
            );
        }
        Command::Eval(c) => {
            let (cfg, _) = resolve(&c, &[])?;
            let o = commands::eval(&cfg)?;
            println!("report {} and {}", o.json.display(), o.csv.display());
            for p in &o.charts {
                println!("chart {}", p.display());
            }
        }
        Command::Ablate(c) => {
            let (cfg, _) = resolve(&c, &[])?;
            let o = commands::ablate(&cfg)?;
            for (cell, status) in &o.cells {
                let s = match status {
                    CellStatus::Done(_) => "done".to_string(),
                    CellStatus::Skipped(_) => "skipped (up to date)".to_string(),
                    CellStatus::Failed(m) => format!("failed: {m}"),
                };
                println!(
                    "p={} lambda={} seed={}: {s}",
                    cell.p, cell.lambda, cell.seed
                );
            }
            println!("summary {}", o.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
