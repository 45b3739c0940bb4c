//! `npo`: dataset generation, training, solving, benchmarking and spectrum
//! reports for the neural AMG preconditioner.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use npo_core::PdeFamily;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "npo", version, about = "Neural AMG preconditioning for PDE linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assemble systems, sample GRF right-hand sides and record GMRES trajectories.
    GenData(GenDataArgs),
    /// Train a NAMG model on a generated dataset.
    Train(TrainArgs),
    /// Solve one system read from disk.
    Solve(SolveArgs),
    /// Iteration counts per method, resolution and tolerance.
    Bench(BenchArgs),
    /// Extreme eigenvalues, condition number and contraction factor of `MA`.
    Spectrum(SpectrumArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value = "poisson1d")]
    pub family: PdeFamily,
    /// Comma-separated grid sizes; `128` is 1D, `64x64` is 2D.
    #[arg(long, default_value = "128")]
    pub grid: String,
    #[arg(long, default_value_t = 32)]
    pub n_systems: usize,
    #[arg(long, default_value_t = 1)]
    pub n_rhs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub length_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub variance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub w_data: Option<f64>,
    #[arg(long)]
    pub w_residual: Option<f64>,
    #[arg(long)]
    pub w_condition: Option<f64>,
    #[arg(long)]
    pub pre_sweeps: Option<usize>,
    #[arg(long)]
    pub post_sweeps: Option<usize>,
    #[arg(long)]
    pub num_coarse: Option<usize>,
    /// Bypass the network; only the learnable relaxation remains.
    #[arg(long)]
    pub no_network: bool,
    /// Zero the node features derived from the matrix.
    #[arg(long)]
    pub no_matrix_features: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverArg {
    Cg,
    Gmres,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecondArg {
    None,
    Jacobi,
    Gs,
    Sor,
    Twogrid,
    Namg,
    /// Dense exact inverse, for checks on small systems.
    Exact,
}

#[derive(Args, Debug, Clone)]
pub struct PrecondOpts {
    /// NAMG checkpoint, required by `--precond namg`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Relaxation factor for `sor`.
    #[arg(long, default_value_t = 1.5)]
    pub omega: f64,
    /// Sweeps per application of `jacobi`, `gs` and `sor`.
    #[arg(long, default_value_t = 1)]
    pub sweeps: usize,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub rhs: PathBuf,
    #[arg(long, value_enum, default_value = "gmres")]
    pub solver: SolverArg,
    #[arg(long, value_enum, default_value = "none")]
    pub precond: PrecondArg,
    #[command(flatten)]
    pub opts: PrecondOpts,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iters: usize,
    /// GMRES restart length; full GMRES when omitted.
    #[arg(long)]
    pub restart: Option<usize>,
    /// Grid behind the matrix (`512` or `64x64`); a 1D grid of matching
    /// size is assumed when omitted.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Where to write the solution vector.
    #[arg(long)]
    pub x_out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// 1D Poisson, `n` unknowns.
    Poisson,
    /// 2D diffusion, `n x n` grid.
    Diffusion,
    /// 2D plane-strain elasticity, `n x n` grid.
    Elasticity,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "poisson")]
    pub suite: Suite,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    pub resolutions: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "jacobi,gs,twogrid")]
    pub precond_list: Vec<PrecondArg>,
    #[command(flatten)]
    pub opts: PrecondOpts,
    /// Seed of the GRF right-hand side.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iters: usize,
    #[arg(long)]
    pub restart: Option<usize>,
    /// Fill the `seconds` column with wall-clock times (non-reproducible).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    Dense,
    Lanczos,
    Power,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[arg(long, conflicts_with_all = ["family", "grid"])]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<PdeFamily>,
    /// Comma-separated grid sizes; `127` is 1D, `31x31` is 2D.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_enum, default_value = "none")]
    pub precond: PrecondArg,
    #[command(flatten)]
    pub opts: PrecondOpts,
    #[arg(long, value_enum, default_value = "dense")]
    pub method: MethodArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Solve(a) => commands::solve(&a, &argv),
        Command::Bench(a) => commands::bench(&a, &argv),
        Command::Spectrum(a) => commands::spectrum(&a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
