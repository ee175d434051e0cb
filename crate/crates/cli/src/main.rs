//! `combostoc` command-line entry point.
//!
//! ```text
//! combostoc <density|particles|train|sample|graded|assemble> --config FILE
//!           [--seed N] [--out DIR] [--threads K] [--grid NXxNY] [key=value ...]
//! ```
//!
//! Exit codes: 0 ok, 1 other failure, 2 config error, 3 numerical failure,
//! 4 missing checkpoint or input artifact.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde_json::Value;

use config::{parse_grid, parse_override, set_path, CliResult, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    Density,
    Particles,
    Train,
    Sample,
    Graded,
    Assemble,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Density => "density",
            Command::Particles => "particles",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Graded => "graded",
            Command::Assemble => "assemble",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "combostoc", version, about = "Path-space experiments, training and sampling with vectorized timesteps")]
struct Cli {
    command: Command,
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `runs/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker cap; recorded in the echo.
    #[arg(long)]
    threads: Option<usize>,
    /// Grid size for density maps and particle fields, e.g. `30x30`.
    #[arg(long)]
    grid: Option<String>,
    /// Dotted overrides such as `unsync.mode=all` or `n_pairs=1000`.
    overrides: Vec<String>,
}

fn resolve(cli: &Cli) -> CliResult<Value> {
    let mut v = config::load(&cli.config)?;
    for o in &cli.overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut v, &path, value)?;
    }
    let key = |k: &str| vec![k.to_owned()];
    if let Some(seed) = cli.seed {
        set_path(&mut v, &key("seed"), seed.into())?;
    }
    if let Some(out) = &cli.out {
        set_path(&mut v, &key("out"), out.to_string_lossy().into_owned().into())?;
    }
    if v.get("out").is_none() {
        set_path(&mut v, &key("out"), format!("runs/{}", cli.command.name()).into())?;
    }
    if let Some(t) = cli.threads {
        set_path(&mut v, &key("threads"), t.into())?;
    }
    if let Some(g) = &cli.grid {
        let [nx, ny] = parse_grid(g)?;
        match cli.command {
            Command::Density => {
                set_path(&mut v, &["grid".into(), "nx".into()], nx.into())?;
                set_path(&mut v, &["grid".into(), "ny".into()], ny.into())?;
            }
            Command::Particles => {
                set_path(&mut v, &["experiment".into(), "grid_cells".into()], serde_json::json!([nx, ny]))?;
            }
            other => {
                return Err(Failure::Config(format!("--grid does not apply to `{}`", other.name())));
            }
        }
    }
    Ok(v)
}

fn run(cli: &Cli) -> CliResult<()> {
    let v = resolve(cli)?;
    match cli.command {
        Command::Density => commands::density(v),
        Command::Particles => commands::particles(v),
        Command::Train => commands::train(v),
        Command::Sample => commands::sample(v),
        Command::Graded => commands::graded(v),
        Command::Assemble => commands::assemble(v),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("combostoc {}: {e}", cli.command.name());
            ExitCode::from(e.code())
        }
    }
}
