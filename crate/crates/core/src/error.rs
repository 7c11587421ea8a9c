use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("ill-conditioned propagator: 1-t = {gap:e} below 1/N = {limit:e}")]
    NearSingular { gap: f64, limit: f64 },
    #[error("integration blew up; last valid t = {last_t}")]
    Blowup { last_t: f64 },
    #[error("size guard: {0}")]
    SizeGuard(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Input(format!("json: {e}"))
    }
}
