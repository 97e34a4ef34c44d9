use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or construction parameters.
    #[error("config error: {0}")]
    Config(String),

    /// NaN or Inf showed up in a sampler state.
    #[error("numerical divergence at timestep {timestep}: {detail}")]
    NumericalDivergence { timestep: u32, detail: String },

    /// sigma_t too large for the DDIM direction coefficient.
    #[error("invalid sigma at timestep {timestep}: 1 - alpha_bar(t_prev) - sigma^2 < 0")]
    InvalidSigma { timestep: u32 },

    /// Least-squares normal equations were singular.
    #[error("singular normal equations; set ridge > 0 ({0})")]
    SingularFit(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl Error {
    /// Process exit code contract: 2 for configuration problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NumericalDivergence { .. } | Error::InvalidSigma { .. } | Error::SingularFit(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Serde("x".into()).exit_code(), 2);
        assert_eq!(
            Error::NumericalDivergence { timestep: 5, detail: "NaN".into() }.exit_code(),
            3
        );
        assert_eq!(Error::InvalidSigma { timestep: 1 }.exit_code(), 3);
        assert_eq!(Error::SingularFit("x".into()).exit_code(), 3);
    }
}
