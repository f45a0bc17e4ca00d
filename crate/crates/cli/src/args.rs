use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "webal", version, about = "Covariate balancing weights and dose-response estimation for matrix treatments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Balancing weights for a dataset.
    Weights {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        balance: BalanceArgs,
    },
    /// Threshold path: WEIM and effective sample size for each grid value.
    Tune {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        balance: BalanceArgs,
    },
    /// Ball-correlation ranking and subset selection for many covariates.
    Screen {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        balance: BalanceArgs,
    },
    /// Weighted dose-response fit, with intervals.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        balance: BalanceArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Monte Carlo study over the built-in scenarios, or export of one
    /// simulated dataset.
    Simulate(SimulateArgs),
    /// Re-render a saved study report.
    Report {
        /// `study.json` written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, env = "WEBAL_OUTPUT_DIR")]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV with header `y, t_1_1 .. t_p_q, x_1 .. x_L`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    /// JSON pipeline configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "WEBAL_OUTPUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Linear,
    Squares,
    Interactions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Newton,
    Bfgs,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    /// Covariate basis: (1, X), (1, X, X^2) or (1, X, X_j X_k).
    #[arg(long, value_enum)]
    pub basis: Option<BasisArg>,
    /// unweighted, eb, mdabw or webm.
    #[arg(long)]
    pub method: Option<String>,
    /// Fixed threshold.
    #[arg(long, conflicts_with_all = ["delta_grid", "grid_points"])]
    pub delta: Option<f64>,
    /// Explicit threshold grid, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "grid_points")]
    pub delta_grid: Option<Vec<f64>>,
    /// Size of the default logarithmic grid.
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub mdabw_c: Option<f64>,
    /// Screen covariates before balancing.
    #[arg(long)]
    pub screen: bool,
    #[arg(long)]
    pub break_factor: Option<f64>,
    /// Threshold used at every screening step.
    #[arg(long)]
    pub screen_delta: Option<f64>,
    /// Keep only these covariates (1-based), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<usize>>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResponseArg {
    Transformed,
    WeightedResidual,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// linear or broadcasted.
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub spline_order: Option<usize>,
    /// Spline basis dimension D.
    #[arg(long)]
    pub spline_dim: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, value_enum)]
    pub response: Option<ResponseArg>,
    /// Number of bootstrap replicates for percentile intervals.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario ids 1-6, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scenario: Option<Vec<u8>>,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub estimator: Option<String>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON study configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write replicate 0 of the first scenario and sample size to this CSV
    /// instead of running the study.
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[arg(long, env = "WEBAL_OUTPUT_DIR")]
    pub out_dir: Option<PathBuf>,
}
