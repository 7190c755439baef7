//! Command-line front-end for the solver.
//!
//! Two subcommands:
//!
//! * `solve --config <path> [--problem P] [--algorithm A,B] [--levels a..b]
//!   [--out DIR]` — run a batch experiment; flags override config-file
//!   keys. Results are emitted in all formats (CSV, JSON records,
//!   plot data) under the output directory, and the EOC table is printed
//!   to stdout.
//! * `eoc --in <records> --out <table.csv>` — rebuild an EOC table from
//!   stored run records (a `records.json` envelope or a directory of
//!   them).
//!
//! The exit code is 0 only when every solve terminated by tolerance;
//! 1 when some run fell short; 2 on configuration or I/O errors.
//! Parallelism across experiment cells honours `RAYON_NUM_THREADS`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use madmm::cli::{self, CellOutcome, EmitFormat, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "madmm",
    version,
    about = "Multilevel inexact ADMM for box-constrained elliptic optimal control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch experiment described by a config file.
    Solve(SolveArgs),
    /// Rebuild an EOC table from stored run records.
    Eoc(EocArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Flat key=value experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the problem (`example1` or `example2`).
    #[arg(long)]
    problem: Option<String>,
    /// Override the drivers: comma-separated subset of
    /// `classical,inexact,madmm`.
    #[arg(long)]
    algorithm: Option<String>,
    /// Override the target levels: `a..b` (inclusive) or `a,b,c`.
    #[arg(long)]
    levels: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EocArgs {
    /// Records file (`records.json`) or a directory of such envelopes.
    #[arg(long = "in")]
    input: PathBuf,
    /// Path of the EOC table CSV to write.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => solve(args),
        Command::Eoc(args) => eoc(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

/// Runs the experiment and emits everything; returns whether every
/// solve reached tolerance.
fn solve(args: SolveArgs) -> madmm::Result<bool> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if let Some(problem) = args.problem {
        config.problem = problem;
    }
    if let Some(algorithms) = args.algorithm {
        config.algorithms = cli::parse_algorithms(&algorithms)?;
    }
    if let Some(levels) = args.levels {
        config.levels = cli::parse_levels(&levels)?;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    config.validate()?;

    let outcome = cli::run_experiment(&config)?;
    let records = outcome.records();
    for format in [EmitFormat::Csv, EmitFormat::Json, EmitFormat::Plotdata] {
        cli::emit(&records, Some(&outcome.table), format, &config.output_dir)?;
    }

    print!("{}", outcome.table.csv_string());
    for (row, cell) in outcome.table.rows.iter().zip(&outcome.cells) {
        if let CellOutcome::Failed { message, .. } = cell {
            eprintln!(
                "cell {} level {} failed: {message}",
                row.algorithm, row.level
            );
        }
    }
    eprintln!("results written to {}", config.output_dir.display());
    Ok(outcome.table.all_converged())
}

/// Rebuilds and writes the table; returns whether every stored run had
/// reached tolerance.
fn eoc(args: EocArgs) -> madmm::Result<bool> {
    let records = cli::load_records(&args.input)?;
    let table = cli::table_from_records(&records)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    fs::write(&args.out, buf)?;
    eprintln!("wrote {}", args.out.display());
    Ok(table.all_converged())
}
