use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use ttmlab::{Config, Experiment, Report};

/// Runs one toy experiment and writes its CSV tables.
#[derive(Parser, Debug)]
#[command(name = "ttmlab", version)]
struct Args {
    /// single-step-error, fd-gap, sample-grid, lte-slopes, encode-decode,
    /// guidance-sweep, train-score or train-head
    experiment: Experiment,

    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,

    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Primary CSV. Further tables go next to it as `<stem>.<table>.csv`.
    /// Without it every table is printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Checkpoint written by train-score and train-head.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

fn side_path(out: &Path, table: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{table}.csv"))
}

fn write(report: &Report, out: Option<&Path>) -> Result<()> {
    match out {
        None => {
            let text: Vec<String> = report.tables.iter().map(|t| report.render(t)).collect();
            print!("{}", text.join("\n"));
        }
        Some(path) => {
            fs::write(path, report.render(report.primary())).with_context(|| format!("writing {}", path.display()))?;
            for t in &report.tables[1..] {
                let p = side_path(path, &t.name);
                fs::write(&p, report.render(t)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(())
}

fn main_inner(args: Args) -> Result<()> {
    let mut cfg = Config::from_file(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed);
    }
    let report = ttmlab::experiments::run(args.experiment, &cfg, args.ckpt.as_deref())?;
    write(&report, args.out.as_deref())
}

fn main() -> ExitCode {
    match main_inner(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ttmlab: {e:#}");
            ExitCode::FAILURE
        }
    }
}
