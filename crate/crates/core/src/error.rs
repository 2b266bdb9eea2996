use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("row {row} has {found} columns, header declares {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a finite number")]
    NonNumericFeature { row: usize, column: String, value: String },
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("dataset `{0}` is not fully labeled")]
    UnlabeledDataset(String),
    #[error("sample {0} has no label")]
    UnlabeledSample(usize),
    #[error("dataset `{0}` has fewer than two classes")]
    SingleClass(String),
    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),
    #[error("training diverged at epoch {0}: loss is not finite")]
    DivergedTraining(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("budget k={k} must be smaller than the {n} available samples")]
    BudgetTooLarge { k: usize, n: usize },
    #[error("invalid budget: k must be at least 1")]
    InvalidBudget,
    #[error("all gradient rows are zero while the target is not")]
    ZeroGradients,
    #[error("instance too large for exhaustive search: {0} supports")]
    InstanceTooLarge(u128),
    #[error("lambda1 + lambda2 * |psi|^2 must be positive")]
    DegenerateDenominator,
    #[error("no features selected for binning")]
    EmptyFeatureList,
    #[error("coordinate arity mismatch: {0} vs {1}")]
    ArityMismatch(usize, usize),
    #[error("the hard set must be fully labeled")]
    UnlabeledHardSet,
    #[error("the model classifies every validation sample correctly; no hard samples")]
    NoHardSamples,
    #[error("strategy unavailable: {0}")]
    StrategyUnavailable(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("orderings do not contain the same elements")]
    ElementMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by a bad configuration or argument rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::InvalidBudget
                | Error::BudgetTooLarge { .. }
                | Error::InstanceTooLarge(_)
                | Error::DegenerateDenominator
                | Error::EmptyFeatureList
        )
    }
}
