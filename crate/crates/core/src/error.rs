use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("lmi problem: {0}")]
    Lmi(String),

    #[error("certificate is infeasible; no bound can be derived from it")]
    InfeasibleCertificate,

    #[error("bias |v({step})| = {norm} exceeds the model bound {bound}")]
    BiasBound { step: usize, norm: f64, bound: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
