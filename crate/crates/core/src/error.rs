use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GmmError {
    #[error("non-finite moment value at row {row}: {detail}")]
    Evaluation { row: usize, detail: String },

    #[error("unknown model `{name}` (valid names: {valid})")]
    UnknownModel { name: String, valid: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (smallest eigenvalue {eig_min:e})")]
    NotPositiveDefinite { eig_min: f64 },

    #[error("{what} is rank deficient (condition number {cond:e})")]
    Rank { what: String, cond: f64 },

    #[error("optimizer did not converge in any start (best criterion {criterion:e}, gradient norm {grad_norm:e})")]
    NonConvergence {
        best: Vec<f64>,
        criterion: f64,
        grad_norm: f64,
    },

    #[error("bootstrap unstable: {failures} of {attempted} replicates failed")]
    BootstrapUnstable {
        failures: usize,
        attempted: usize,
        log: Vec<String>,
    },

    #[error("direction violates the adding-up constraint (residual {residual:e})")]
    Direction { residual: f64 },

    #[error("canonical form construction failed: {0}")]
    Construction(String),

    #[error("Monte Carlo run unstable: {failures} of {attempted} replications failed")]
    MonteCarloUnstable { failures: usize, attempted: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, GmmError>;

impl GmmError {
    /// Stable snake_case name of the variant, for structured error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            GmmError::Evaluation { .. } => "evaluation",
            GmmError::UnknownModel { .. } => "unknown_model",
            GmmError::Config(_) => "config",
            GmmError::Data(_) => "data",
            GmmError::Dimension(_) => "dimension",
            GmmError::Asymmetric { .. } => "asymmetric",
            GmmError::NotPositiveDefinite { .. } => "not_positive_definite",
            GmmError::Rank { .. } => "rank",
            GmmError::NonConvergence { .. } => "non_convergence",
            GmmError::BootstrapUnstable { .. } => "bootstrap_unstable",
            GmmError::Direction { .. } => "direction",
            GmmError::Construction(_) => "construction",
            GmmError::MonteCarloUnstable { .. } => "monte_carlo_unstable",
            GmmError::InvalidArgument(_) => "invalid_argument",
            GmmError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for GmmError {
    fn from(e: std::io::Error) -> Self {
        GmmError::Io(e.to_string())
    }
}

impl From<csv::Error> for GmmError {
    fn from(e: csv::Error) -> Self {
        GmmError::Io(e.to_string())
    }
}
