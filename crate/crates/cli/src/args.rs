//! Command-line arguments.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use debias_core::simgen::{BetaDesign, CovarianceKind, NoiseKind, QueryDesign};
use debias_core::tuning::GammaRule;

/// Seed used when neither `--seed` nor the config file sets one.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(
    name = "debias",
    version,
    about = "Debiased inference on x^T beta for sparse linear models with missing outcomes",
    after_help = "Set DEBIAS_LOG (error, warn, info, debug, trace) to control log output on stderr.\n\
                  Exit codes: 0 success, 2 usage error, 3 invalid input or configuration, 4 numerical failure."
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice (fold splits, simulated data). Default 0,
    /// or the config file's seed. Recorded in every output.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output file (fit, cv) or directory (simulate); stdout when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate x^T beta with a confidence interval from a data table.
    Fit(FitArgs),
    /// Run a Monte Carlo design and write metrics and plot data.
    Simulate(SimulateArgs),
    /// Cross-validate gamma and report the whole grid.
    Cv(FitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// `logistic-lasso`, `oracle` (simulate only: the true propensities) or
/// `oracle:<path>` (one probability per data row).
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityArg {
    LogisticLasso,
    Oracle(Option<PathBuf>),
}

impl FromStr for PropensityArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logistic-lasso" => Ok(PropensityArg::LogisticLasso),
            "oracle" => Ok(PropensityArg::Oracle(None)),
            _ => match s.strip_prefix("oracle:") {
                Some(path) if !path.is_empty() => Ok(PropensityArg::Oracle(Some(path.into()))),
                _ => Err(format!("expected logistic-lasso, oracle or oracle:<path>, got {s:?}")),
            },
        }
    }
}

fn parse_core<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

/// A comma-separated list of numbers given as one argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Floats(pub Vec<f64>);

fn parse_list(s: &str) -> Result<Floats, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect::<Result<_, _>>()
        .map(Floats)
}

/// Flags shared by every subcommand that runs the pipeline.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Rule picking gamma from the CV curve: min-cv, 1se or min-feas [default: 1se].
    #[arg(long, value_parser = parse_core::<GammaRule>)]
    pub gamma_rule: Option<GammaRule>,

    /// Confidence level of the interval [default: 0.95].
    #[arg(long)]
    pub level: Option<f64>,

    /// Propensity model: logistic-lasso, oracle or oracle:<path> [default: logistic-lasso].
    #[arg(long)]
    pub propensity: Option<PropensityArg>,

    /// Use this gamma instead of cross-validating.
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Number of points in the default gamma grid [default: 41].
    #[arg(long)]
    pub grid_points: Option<usize>,

    /// Explicit comma-separated gamma grid, replacing the default one.
    #[arg(long, value_parser = parse_list, conflicts_with = "grid_points")]
    pub gammas: Option<Floats>,

    /// Cross-validation folds for gamma [default: 5].
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Comma-separated table with a header naming Y, R and X1..Xd.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,

    /// Query point as a comma-separated list.
    #[arg(long, value_parser = parse_list, allow_hyphen_values = true, conflicts_with = "query")]
    pub x: Option<Floats>,

    /// File holding the query point (numbers separated by commas or whitespace).
    #[arg(long, value_name = "PATH")]
    pub query: Option<PathBuf>,

    #[command(flatten)]
    pub pipeline: PipelineArgs,

    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DesignKind {
    Mcar,
    MarLogistic,
    MarProbitQuadratic,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Missingness mechanism [default: mar-logistic].
    #[arg(long, value_enum)]
    pub design: Option<DesignKind>,

    /// Observation probability under --design mcar [default: 0.7].
    #[arg(long)]
    pub mcar_p: Option<f64>,

    /// Replications [default: 300].
    #[arg(long)]
    pub reps: Option<usize>,

    /// Sample size [default: 200].
    #[arg(long)]
    pub n: Option<usize>,

    /// Dimension [default: 50].
    #[arg(long)]
    pub d: Option<usize>,

    /// circulant-symmetric, toeplitz-ar or identity.
    #[arg(long, value_parser = parse_core::<CovarianceKind>)]
    pub covariance: Option<CovarianceKind>,

    /// sparse, dense or pseudo-dense.
    #[arg(long, value_parser = parse_core::<BetaDesign>)]
    pub beta: Option<BetaDesign>,

    /// x1, x2, x3 or x4.
    #[arg(long, value_parser = parse_core::<QueryDesign>)]
    pub query: Option<QueryDesign>,

    /// gaussian, laplace or student-t2.
    #[arg(long, value_parser = parse_core::<NoiseKind>)]
    pub noise: Option<NoiseKind>,

    /// Also write this replication's data table and query point.
    #[arg(long, value_name = "REP")]
    pub save_data: Option<usize>,

    #[command(flatten)]
    pub pipeline: PipelineArgs,
}
