use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: non-numeric value `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },

    #[error("row {row}, instrument `{column}`: value {value} is not 0 or 1")]
    NonBinaryInstrument {
        row: usize,
        column: String,
        value: f64,
    },

    #[error("no observations")]
    NoObservations,

    #[error("column lengths differ: {0}")]
    ShapeMismatch(String),

    #[error("outer support empty: {n1} rows with all instruments 1, {n0} with all instruments 0")]
    OuterSupportEmpty { n1: usize, n0: usize },

    #[error("cut-offs coincide at {0}")]
    CutoffsCoincide(f64),

    #[error("treatment is constant")]
    ConstantTreatment,

    #[error("treatment must be integer-coded 0..J, found {0}")]
    NotIntegerCoded(f64),

    #[error("{count} response types exceed the enumeration cap of {cap}")]
    TypeCapExceeded { count: u128, cap: u64 },

    #[error("instrument irrelevant on outer support (treatment mean difference is zero)")]
    IrrelevantInstrument,

    #[error("instrument irrelevant after adjustment (Jacobian estimate is zero)")]
    IrrelevantAfterAdjustment,

    #[error("pairwise Wald ratio undefined between support points {lower} and {upper}")]
    UndefinedPairwiseWald { lower: String, upper: String },

    #[error("degenerate first stage: {0}")]
    DegenerateFirstStage(String),

    #[error("invalid learner specification: {0}")]
    LearnerSpec(String),

    #[error("learner failed: {0}")]
    Learner(String),

    #[error("fold {fold} is missing instrument arm z={arm} after refolding")]
    DegenerateFold { fold: usize, arm: u8 },

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
