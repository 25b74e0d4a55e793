use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },

    #[error("unknown scheme `{name}` (valid schemes: {valid})")]
    UnknownScheme { name: String, valid: String },

    #[error("failed to parse scenario: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("equilibrium solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("CFL violation at t = {time:.6} h: lambda * wave speed = {ratio:.6} > 1")]
    Cfl { time: f64, ratio: f64 },

    #[error("headway collapsed in cell {cell} for class {class} (h = {headway:.3e} km); reduce the time step")]
    HeadwayCollapse {
        cell: usize,
        class: usize,
        headway: f64,
    },

    #[error("negative density {value:.3e} in cell {cell} for class {class} at t = {time:.6} h")]
    Negative {
        cell: usize,
        class: usize,
        value: f64,
        time: f64,
    },

    #[error("estimation: {0}")]
    Estimation(String),

    #[error("line {line}: {message}")]
    Record { line: u64, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            location: location.into(),
            message: message.into(),
        }
    }
}
