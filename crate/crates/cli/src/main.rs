use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use infoq_cli::{exit_code, pipeline, plot, report, RunConfig, Workspace};
use infoq_core::fixture::FixtureConfig;

#[derive(Parser)]
#[command(name = "infoq", version, about = "Information-flow mixed-precision bit allocation")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Perturbation sweep and observer selection.
    Observers(Common),
    /// Sensitivity scores for every layer and bit width.
    Analyze(Common),
    /// Budgeted bit allocation from a sensitivity table.
    Allocate(Common),
    /// PTQ accuracy of the allocations and baselines.
    Evaluate(Common),
    /// Every stage, then the plot data.
    Run(Common),
    /// CSV bundles from a report.
    Plotdata {
        /// Report to read; defaults to report.json in the output directory.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "infoq-out")]
        out: PathBuf,
    },
    /// Writes the reference model, dataset and a config.
    Fixture {
        #[arg(long, default_value = "infoq-fixture")]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        noise: Option<f32>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "infoq-out")]
    out: PathBuf,
}

impl Common {
    fn workspace(&self) -> Result<Workspace> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Workspace::new(cfg.checked()?, &self.out)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let n = self.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .context("building the worker pool")
    }
}

fn run(cli: Cli) -> Result<()> {
    let stage = |c: &Common, f: fn(&Workspace) -> Result<()>| -> Result<()> {
        let ws = c.workspace()?;
        c.pool()?.install(|| f(&ws))
    };
    match &cli.command {
        Command::Observers(c) => stage(c, |ws| ws.observers().map(drop)),
        Command::Analyze(c) => stage(c, |ws| ws.analyze().map(drop)),
        Command::Allocate(c) => stage(c, |ws| ws.allocate().map(drop)),
        Command::Evaluate(c) => stage(c, |ws| {
            let ev = ws.evaluate()?;
            for b in &ev.budgets {
                println!(
                    "{}: infoq {:.4}  reversed {:.4}  random {:.4}",
                    b.spec, b.infoq, b.reversed, b.random_mean
                );
            }
            Ok(())
        }),
        Command::Run(c) => stage(c, |ws| ws.run().map(drop)),
        Command::Plotdata { report, out } => {
            let path = report.clone().unwrap_or_else(|| out.join(report::REPORT_FILE));
            let r = report::Report::load(&path)?;
            plot::write_all(&r, out)
        }
        Command::Fixture {
            out,
            seed,
            samples,
            noise,
        } => {
            let mut fc = FixtureConfig {
                seed: *seed,
                ..FixtureConfig::default()
            };
            if let Some(s) = samples {
                fc.samples = *s;
            }
            if let Some(n) = noise {
                fc.noise = *n;
            }
            let cfg = pipeline::write_fixture(out, &fc)?;
            println!("{}", cfg.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
