use thiserror::Error;

pub type Result<T, E = KcutError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KcutError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cut-record set is empty (total count is zero)")]
    EmptyRecords,

    #[error("malformed cut records: {0}")]
    MalformedRecords(String),

    #[error("model does not fit a stack of {n}: {detail}")]
    ModelOutOfRange { n: usize, detail: String },

    #[error("underdetermined fit: {nonzero} nonzero bins, need at least {needed}")]
    UnderdeterminedFit { nonzero: usize, needed: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("adjustment {bound} exhausts risk limit {alpha}; raise k")]
    AdjustmentExhaustsRiskLimit { alpha: f64, bound: f64 },

    #[error("no k <= {max_k} brings the adjustment under budget {budget} (best {best_bound} at k={max_k})")]
    BudgetUnreachable {
        budget: f64,
        max_k: usize,
        best_bound: f64,
    },

    #[error("session is finalized ({0})")]
    SessionFinalized(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("unknown stack id {0:?}")]
    UnknownStack(String),

    #[error("unknown candidate {0:?}")]
    UnknownCandidate(String),

    #[error("invalid contest: {0}")]
    InvalidContest(String),

    #[error("k is fixed at {issued}; refusing to reissue with k={requested}")]
    ImmutabilityViolation { issued: usize, requested: usize },

    #[error("audit engine returned different results for identical input")]
    EngineContractViolation,

    #[error("malformed interpretation log line {line}: {detail}")]
    MalformedLog { line: usize, detail: String },

    #[error("malformed model spec {spec:?}: {detail}")]
    MalformedModelSpec { spec: String, detail: String },

    #[error("i/o: {0}")]
    Io(String),
}

impl KcutError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KcutError::InvalidArgument(msg.into())
    }

    /// Stable machine-readable tag, used by the service in error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            KcutError::InvalidArgument(_) => "invalid-argument",
            KcutError::EmptyRecords => "empty-records",
            KcutError::MalformedRecords(_) => "malformed-records",
            KcutError::ModelOutOfRange { .. } => "model-out-of-range",
            KcutError::UnderdeterminedFit { .. } => "underdetermined-fit",
            KcutError::DimensionMismatch { .. } => "dimension-mismatch",
            KcutError::AdjustmentExhaustsRiskLimit { .. } => "adjustment-exhausts-risk-limit",
            KcutError::BudgetUnreachable { .. } => "budget-unreachable",
            KcutError::SessionFinalized(_) => "session-finalized",
            KcutError::InsufficientData(_) => "insufficient-data",
            KcutError::MalformedManifest(_) => "malformed-manifest",
            KcutError::UnknownStack(_) => "unknown-stack",
            KcutError::UnknownCandidate(_) => "unknown-candidate",
            KcutError::InvalidContest(_) => "invalid-contest",
            KcutError::ImmutabilityViolation { .. } => "immutability-violation",
            KcutError::EngineContractViolation => "engine-contract-violation",
            KcutError::MalformedLog { .. } => "malformed-log",
            KcutError::MalformedModelSpec { .. } => "malformed-model-spec",
            KcutError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for KcutError {
    fn from(e: std::io::Error) -> Self {
        KcutError::Io(e.to_string())
    }
}
