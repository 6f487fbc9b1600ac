use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver did not converge after {iterations} iterations (last gap {last_gap:e})")]
    NonConvergence { iterations: usize, last_gap: f64 },
    #[error("invariant violated: {}", .0.join("; "))]
    Invariant(Vec<String>),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Core(mkvlab_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(e: mkvlab_core::Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// Parameter errors raised before any work is done count as config errors.
    pub fn config_or_run(e: mkvlab_core::Error) -> Self {
        match e {
            mkvlab_core::Error::InvalidParameter(m) => CliError::Config(m),
            other => other.into(),
        }
    }

    /// 0 ok, 2 config, 3 non-convergence, 4 invariant violation, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonConvergence { .. } => 3,
            CliError::Invariant(_) => 4,
            _ => 1,
        }
    }
}

impl From<mkvlab_core::Error> for CliError {
    fn from(e: mkvlab_core::Error) -> Self {
        match e {
            mkvlab_core::Error::NonConvergence { iterations, last_gap, .. } => {
                CliError::NonConvergence { iterations, last_gap }
            }
            other => CliError::Core(other),
        }
    }
}
