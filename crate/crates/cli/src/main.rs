//! Command-line driver: dataset generation, training, evaluation and
//! comparison of the semi-supervised segmentation methods.

mod dataset;
mod plots;
mod runs;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cemt_core::metrics::aggregate;
use cemt_core::trainer::Method;
use clap::{Args, Parser, Subcommand};

use crate::dataset::LoadedDataset;
use crate::runs::{Cell, Comparison};
use crate::spec::ExperimentSpec;

#[derive(Parser)]
#[command(name = "cemt", version, about = "Competitive-ensembling mean teacher experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment spec (TOML); defaults to the built-in desk-scale spec.
    #[arg(long, global = true, value_name = "PATH")]
    spec: Option<PathBuf>,
    /// Output directory; overridden by CEMT_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Use the full 6000-iteration schedule with decay every 2500 steps.
    #[arg(long = "paper-scale", global = true)]
    full_scale: bool,
}

#[derive(Args)]
struct CellArgs {
    #[arg(long, value_name = "NAME", value_parser = parse_method)]
    method: Method,
    /// Number of labeled training samples.
    #[arg(long, value_name = "N")]
    split: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and its manifest, or verify an existing one.
    GenerateData,
    /// Train one (method, split, seed) cell.
    Train(CellArgs),
    /// Re-score a trained cell from its checkpoint.
    Evaluate(CellArgs),
    /// Run or load every cell of the spec and write the comparison table and plots.
    Compare,
    /// Like `compare`, but only loads existing runs and lists the missing ones.
    Report,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

struct Session {
    spec: ExperimentSpec,
    out: PathBuf,
    full_scale: bool,
}

impl Session {
    fn new(g: &Global) -> Result<Self> {
        let spec = ExperimentSpec::load(g.spec.as_deref())?;
        let out = std::env::var_os("CEMT_OUT")
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| g.out.clone())
            .unwrap_or_else(|| spec.out.clone());
        Ok(Self {
            spec,
            out,
            full_scale: g.full_scale,
        })
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn load_data(&self) -> Result<LoadedDataset> {
        LoadedDataset::load(&self.data_dir())
    }

    fn cell(&self, a: &CellArgs) -> Result<Cell> {
        anyhow::ensure!(
            a.split >= 1 && a.split <= self.spec.n_train(),
            "split {} is outside 1..={}",
            a.split,
            self.spec.n_train()
        );
        Ok(Cell {
            method: a.method,
            n_labeled: a.split,
            seed: a.seed,
        })
    }
}

fn print_summary(label: &str, cases: &[cemt_core::trainer::CaseRecord]) {
    let s = aggregate(&cases.iter().map(|c| c.metrics).collect::<Vec<_>>());
    println!(
        "{label}: Dice {:.4} Jaccard {:.4} ASD {:.3} 95HD {:.3} ({} cases, {} degenerate)",
        s.dice.mean, s.jaccard.mean, s.asd.mean, s.hd95.mean, s.dice.n, s.dice.degenerate_count
    );
}

fn compare(ctx: &Session, run: bool) -> Result<()> {
    let cmp = Comparison::collect(&ctx.spec, &ctx.out, ctx.full_scale, run, || {
        dataset::generate(&ctx.spec, &ctx.data_dir())?;
        ctx.load_data()
    })?;
    let dir = ctx.out.join("compare");
    let written = cmp.write(&ctx.spec, &dir)?;
    print!("{}", cmp.text(&ctx.spec));
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Session::new(&cli.global)?;
    match &cli.command {
        Command::GenerateData => {
            let dir = ctx.data_dir();
            let s = dataset::generate(&ctx.spec, &dir)?;
            println!("{}: {} files written, {} verified", dir.display(), s.written, s.verified);
        }
        Command::Train(a) => {
            let cell = ctx.cell(a)?;
            let data = ctx.load_data()?;
            let report = runs::run_cell(&ctx.spec, &data, cell, ctx.full_scale, &ctx.out)?;
            print_summary(&cell.to_string(), &report.cases);
            println!("report written to {}", cell.dir(&ctx.out).display());
        }
        Command::Evaluate(a) => {
            let cell = ctx.cell(a)?;
            let config = ctx.spec.train_config(cell.method, cell.seed, ctx.full_scale)?;
            let data = ctx.load_data()?;
            let cases = runs::evaluate_cell(&data, cell, &config, &ctx.out)?;
            let dir = cell.dir(&ctx.out);
            let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
            let metrics: Vec<_> = cases.iter().map(|c| c.metrics).collect();
            let path = dir.join("evaluation.csv");
            let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            cemt_core::metrics::write_cases_csv(file, &ids, &metrics)?;
            print_summary(&cell.to_string(), &cases);
        }
        Command::Compare => compare(&ctx, true)?,
        Command::Report => compare(&ctx, false)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
