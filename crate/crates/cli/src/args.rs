use std::path::PathBuf;

use ccacr::learners::tree::PruneRule;
use ccacr::learners::LearnerSpec;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "ccacr", version, about = "CC-ACR estimation and limited-monotonicity diagnostics")]
#[command(arg_required_else_help = true, propagate_version = true)]
pub struct Cli {
    /// Master seed for every random component.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; 0 uses all cores. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Write the report here instead of stdout.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// CC-ACR point estimate (Wald ratio or DML).
    Estimate(EstimateArgs),
    /// DML estimate with covariates.
    Dml(DmlArgs),
    /// TSLS decomposition and treatment-margin weights.
    Decompose(DecomposeArgs),
    /// Permutation test of first-order stochastic dominance.
    KsTest(KsArgs),
    /// Local limited-monotonicity test.
    LimTest(LimArgs),
    /// Monte Carlo rejection rates for a built-in scenario.
    Simulate(SimulateArgs),
    /// Count (and optionally list) response types.
    Types(TypesArgs),
    /// Cut a continuous column into a binary instrument.
    Binarize(BinarizeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Dml(_) => "dml",
            Command::Decompose(_) => "decompose",
            Command::KsTest(_) => "ks-test",
            Command::LimTest(_) => "lim-test",
            Command::Simulate(_) => "simulate",
            Command::Types(_) => "types",
            Command::Binarize(_) => "binarize",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub outcome: String,
    #[arg(long)]
    pub treatment: String,
    /// Comma-separated instrument columns.
    #[arg(long, value_delimiter = ',', required = true)]
    pub instruments: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// `col:low:high` percentiles; repeatable. `col` alone uses 0.25 and 0.75.
    #[arg(long)]
    pub binarize: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wald,
    Dml,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Method::Wald)]
    pub method: Method,
    #[arg(long, default_value_t = 0.95)]
    pub ci: f64,
    #[command(flatten)]
    pub dml: DmlOptions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DmlOptions {
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 5)]
    pub splits: usize,
    /// Propensity trimming bound.
    #[arg(long, default_value_t = ccacr::learners::DEFAULT_TRIM)]
    pub trim: f64,
    /// Default learner for every nuisance, e.g. `lasso:order=2`, a JSON
    /// object, or `@file.json`.
    #[arg(long, value_parser = parse_learner, default_value = "lasso")]
    pub learner: LearnerSpec,
    /// Outcome learner candidates; several trigger CV-RMSE selection.
    #[arg(long = "learner-y", value_parser = parse_learner)]
    pub learner_y: Vec<LearnerSpec>,
    #[arg(long = "learner-d", value_parser = parse_learner)]
    pub learner_d: Vec<LearnerSpec>,
    #[arg(long = "learner-z", value_parser = parse_learner)]
    pub learner_z: Vec<LearnerSpec>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DmlArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.95)]
    pub ci: f64,
    #[command(flatten)]
    pub dml: DmlOptions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Treatment grid for the continuous weight curve, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 999)]
    pub resamples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prune {
    OneSe,
    MinCv,
}

impl From<Prune> for PruneRule {
    fn from(p: Prune) -> Self {
        match p {
            Prune::OneSe => PruneRule::OneSe,
            Prune::MinCv => PruneRule::MinCv,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestOptions {
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Minimum leaf size of the score tree; default max(20, ceil(n/30)).
    #[arg(long = "min-leaf")]
    pub min_leaf: Option<usize>,
    /// Forest used for the propensity, the pseudo-outcome mean and the
    /// causal forest, e.g. `forest:trees=500,minleaf=10`.
    #[arg(long, value_parser = parse_learner)]
    pub learner: Option<LearnerSpec>,
    #[arg(long, value_enum, default_value_t = Prune::OneSe)]
    pub prune: Prune,
    #[arg(long = "cv-folds", default_value_t = 5)]
    pub cv_folds: usize,
    #[arg(long, default_value_t = ccacr::learners::DEFAULT_TRIM)]
    pub trim: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LimArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub test: TestOptions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Built-in scenario: lim-valid or lim-violated.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long)]
    pub n: Option<usize>,
    /// `key=value` scenario override; repeatable.
    #[arg(long = "override")]
    pub overrides: Vec<String>,
    /// Include wall-clock runtime (breaks byte-reproducibility).
    #[arg(long)]
    pub timings: bool,
    #[command(flatten)]
    pub test: TestOptions,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TypesArgs {
    /// Number of treatment levels (J + 1).
    #[arg(long)]
    pub levels: usize,
    #[arg(long)]
    pub instruments: usize,
    /// `none`, `lim`, `lim-`, `pm:+-..` or `iam`; repeatable.
    #[arg(long, default_value = "lim")]
    pub rule: Vec<String>,
    /// IAM assignment order, e.g. `00,01,10,11`.
    #[arg(long)]
    pub order: Option<String>,
    /// Emit every type with its combined type and allowed flags.
    #[arg(long)]
    pub table: bool,
    #[arg(long, default_value_t = ccacr::types::DEFAULT_TYPE_CAP)]
    pub cap: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BinarizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub column: String,
    #[arg(long, default_value_t = 0.25)]
    pub low: f64,
    #[arg(long, default_value_t = 0.75)]
    pub high: f64,
}

/// `name:key=value,...`, an inline JSON object, or `@path` to a JSON file.
pub fn parse_learner(text: &str) -> Result<LearnerSpec, String> {
    let json = if let Some(path) = text.strip_prefix('@') {
        Some(std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?)
    } else if text.trim_start().starts_with('{') {
        Some(text.to_string())
    } else {
        None
    };
    match json {
        Some(j) => serde_json::from_str(&j).map_err(|e| format!("bad learner JSON: {e}")),
        None => LearnerSpec::parse(text).map_err(|e| e.to_string()),
    }
}
