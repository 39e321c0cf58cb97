mod commands;
mod config;
mod family;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use family::FamilyParams;
use output::Failure;

#[derive(Debug, Parser)]
#[command(name = "spinfact", version, about = "Exact product eigenstates of quadratic spin Hamiltonians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check whether the trial product state is an exact eigenstate (JSON report).
    Verify(VerifyArgs),
    /// Coupling spaces and admissible fields compatible with a trial state (JSON).
    Solve(SolveArgs),
    /// Exact spectra at one point or along a parameter axis (CSV).
    Spectrum(SpectrumArgs),
    /// Ground-state identity along a parameter axis with bisected boundaries (CSV).
    Sweep(SweepArgs),
    /// Write the model (and candidate state) as TOML, optionally the matrix as triplets.
    ExportModel(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    /// Builtin family: mg_xxz, xyz_ladder, xyz_tetramer, kurmann.
    #[arg(long, conflicts_with = "config")]
    pub model: Option<String>,
    /// TOML model file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Periodic boundary (default).
    #[arg(long, conflicts_with = "open")]
    pub cyclic: bool,
    /// Open boundary.
    #[arg(long)]
    pub open: bool,
    /// Restrict to one candidate state by label.
    #[arg(long)]
    pub candidate: Option<String>,
    #[command(flatten)]
    pub params: FamilyParams,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Relative verdict tolerance.
    #[arg(long, env = "SPINFACT_TOL", default_value_t = 1e-9)]
    pub tol: f64,
    /// Largest dimension diagonalized densely.
    #[arg(long = "dense-cap", env = "SPINFACT_DENSE_CAP", default_value_t = spinfact::diagonalize::DEFAULT_DENSE_CAP)]
    pub dense_cap: usize,
    /// Lowest k levels by Lanczos instead of the dense spectrum.
    #[arg(long)]
    pub lowest: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Axis {
    /// Parameter to vary (a family flag name such as Jz, JD, or 2JD/JE).
    #[arg(long)]
    pub param: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub start: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub stop: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrialKind {
    Singlet,
    Coherent,
}

#[derive(Debug, Clone, Args)]
pub struct Trial {
    /// Builtin trial state when no model or config is given.
    #[arg(long, value_enum)]
    pub trial: Option<TrialKind>,
    /// Number of factors in the builtin trial.
    #[arg(long, default_value_t = 2)]
    pub factors: usize,
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    pub xi: f64,
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub parity: i8,
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub phi: f64,
    /// Include the coupling-space basis vectors.
    #[arg(long)]
    pub basis: bool,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    trial: Trial,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    axis: Axis,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    axis: Axis,
    /// Bisection resolution for boundaries.
    #[arg(long, default_value_t = 1e-6)]
    resolution: f64,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    common: Common,
    /// Also write the assembled matrix as (row, col, re, im) CSV.
    #[arg(long)]
    triplets: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Verify(a) => commands::verify(&a.source, &a.common),
        Command::Solve(a) => commands::solve(&a.source, &a.common, &a.trial),
        Command::Spectrum(a) => commands::spectrum(&a.source, &a.common, &a.axis),
        Command::Sweep(a) => commands::sweep(&a.source, &a.common, &a.axis, a.resolution),
        Command::ExportModel(a) => commands::export_model(&a.source, &a.common, a.triplets.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(output::EXIT_PARSE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("spinfact: {f}");
            ExitCode::from(f.code())
        }
    }
}
