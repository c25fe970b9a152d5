use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("rasters are not coregistered: {0}")]
    Coregistration(String),
    #[error("numerical failure: {what} (residual {residual:e})")]
    Numerical { what: String, residual: f64 },
    #[error("total internal reflection: sin of refracted angle is {sin_out}")]
    TotalInternalReflection { sin_out: f64 },
    #[error("degenerate regression data: {0}")]
    Rank(String),
    #[error("SVR solver did not converge after {iterations} iterations (KKT gap {kkt_gap:e})")]
    NonConvergence { iterations: usize, kkt_gap: f64 },
    #[error("loss undefined: mask has no valid pixels")]
    EmptyMask,
    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),
    #[error("dataset has no patch with valid depth supervision")]
    NoSupervision,
}
