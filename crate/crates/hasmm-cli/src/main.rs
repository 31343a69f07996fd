//! `hasmm`: one binary driving the whole pipeline, so every artifact carries
//! the same provenance header: generate -> build-table -> learn ->
//! filter/score -> evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error
  3  malformed input file
  4  transition-table fingerprint mismatch
  5  solver or EM iteration failed to converge
  1  any other failure

Errors are printed to stderr as a single JSON object:
  {\"error\":{\"code\":3,\"kind\":\"malformed_file\",\"message\":\"...\"}}

The HASMM_LOG environment variable sets the log level (error..trace).";

#[derive(Parser)]
#[command(
    name = "hasmm",
    version,
    about = "Hidden absorbing semi-Markov models: simulate, tabulate, filter, learn, evaluate",
    after_help = EXIT_CODES
)]
struct Cli {
    /// Cap worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Zero timestamps and wall times in outputs so reruns are byte-identical
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample synthetic episodes from a parameter file
    Generate(GenerateArgs),
    /// Precompute and save the interval transition-probability table
    BuildTable(BuildTableArgs),
    /// Emit one posterior snapshot per observation (JSON Lines)
    Filter(FilterArgs),
    /// Emit one risk trace per episode, ready for `evaluate` (JSON Lines)
    Score(FilterArgs),
    /// Fit parameters by Monte Carlo EM
    Learn(LearnArgs),
    /// Detection metrics (TPR-vs-PPV curve, AUC, timeliness) from risk traces
    Evaluate(EvaluateArgs),
    /// Cross-check the solvers against built-in oracles
    Selftest,
}

#[derive(Args)]
struct GenerateArgs {
    /// Model parameters (JSON)
    #[arg(long, value_name = "FILE")]
    params: PathBuf,
    /// Number of episodes to sample
    #[arg(long)]
    count: usize,
    /// Master RNG seed
    #[arg(long)]
    seed: u64,
    /// Output episodes (JSON Lines)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct BuildTableArgs {
    /// Model parameters (JSON)
    #[arg(long, value_name = "FILE")]
    params: PathBuf,
    /// Output table (binary)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Grid resolution in hours
    #[arg(long, default_value_t = 0.5)]
    grid_dt: f64,
    /// Horizon steps (default: probed until absorption plateaus)
    #[arg(long, value_name = "STEPS")]
    grid_a: Option<usize>,
    /// Elapsed-time lower-bound steps (default: the 99% sojourn quantile)
    #[arg(long, value_name = "STEPS")]
    grid_b: Option<usize>,
    /// Elapsed-time upper-bound steps (default: the 99% sojourn quantile)
    #[arg(long, value_name = "STEPS")]
    grid_c: Option<usize>,
    /// Fixed-point convergence threshold
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
}

#[derive(Args)]
struct FilterArgs {
    /// Model parameters (JSON)
    #[arg(long, value_name = "FILE")]
    params: PathBuf,
    /// Input episodes (JSON Lines)
    #[arg(long, value_name = "FILE")]
    episodes: PathBuf,
    /// Output records (JSON Lines)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Prebuilt transition table; without it one is built and cached
    /// beside the parameter file
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
    /// Grid resolution in hours used when building a table
    #[arg(long, default_value_t = 0.5)]
    grid_dt: f64,
}

#[derive(Args)]
struct LearnArgs {
    /// Training episodes (JSON Lines)
    #[arg(long, value_name = "FILE")]
    episodes: PathBuf,
    /// Output fitted parameters (JSON)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Master RNG seed
    #[arg(long)]
    seed: u64,
    /// Number of latent states to fit
    #[arg(long, required_unless_present = "candidates", conflicts_with = "candidates")]
    n_states: Option<usize>,
    /// Comma-separated state counts; the lowest-BIC fit wins
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    candidates: Option<Vec<usize>>,
    /// Trajectories sampled per episode
    #[arg(long, default_value_t = 50, value_name = "G")]
    mc_samples: usize,
    /// Maximum EM iterations
    #[arg(long, default_value_t = 30)]
    max_iter: usize,
    /// Relative parameter change below which EM stops
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    /// Grid resolution in hours for filtering and likelihood estimates
    #[arg(long, default_value_t = 0.5)]
    grid_dt: f64,
    /// Redraw trajectories when importance weights degenerate
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    ess_refresh: bool,
    /// Starting parameters (JSON; default: data-driven initialization)
    #[arg(long, value_name = "FILE")]
    initial: Option<PathBuf>,
    /// Iteration-trace CSV (default: the output path with a .trace.csv suffix)
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Risk traces from `score` (JSON Lines)
    #[arg(long, value_name = "FILE")]
    scores: PathBuf,
    /// Output summary JSON
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Operating-point curve CSV (default: the output path with a .curve.csv
    /// suffix)
    #[arg(long, value_name = "FILE")]
    curve: Option<PathBuf>,
    /// Thresholds to sweep, as lo:hi:count (inclusive, evenly spaced)
    #[arg(long, value_parser = commands::parse_sweep, default_value = "0:1:101")]
    threshold_sweep: commands::Sweep,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HASMM_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(err) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("thread pool already initialized: {err}");
        }
    }
    let deterministic = cli.deterministic;
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args, deterministic),
        Command::BuildTable(args) => commands::build_table(args),
        Command::Filter(args) => commands::filter(args, deterministic),
        Command::Score(args) => commands::score(args, deterministic),
        Command::Learn(args) => commands::learn(args, deterministic),
        Command::Evaluate(args) => commands::evaluate(args, deterministic),
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let report = serde_json::json!({
                "error": { "code": code, "kind": kind(&err), "message": err.to_string() }
            });
            eprintln!("{report}");
            ExitCode::from(code)
        }
    }
}

fn exit_code(err: &hasmm::Error) -> u8 {
    use hasmm::Error::*;
    match err {
        MalformedFile(_) | Json(_) => 3,
        FingerprintMismatch { .. } => 4,
        NonConvergence { .. } => 5,
        _ => 1,
    }
}

fn kind(err: &hasmm::Error) -> &'static str {
    use hasmm::Error::*;
    match err {
        InvalidParameter(_) => "invalid_parameter",
        InvalidInput(_) => "invalid_input",
        MalformedFile(_) => "malformed_file",
        FingerprintMismatch { .. } => "fingerprint_mismatch",
        NonConvergence { .. } => "non_convergence",
        SamplerStalled(_) => "sampler_stalled",
        FilterDegenerate { .. } => "filter_degenerate",
        BudgetExceeded(_) => "budget_exceeded",
        Io(_) => "io",
        Json(_) => "json",
    }
}
