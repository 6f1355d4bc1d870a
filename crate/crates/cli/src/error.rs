use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: rfprint::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }

    pub fn stage(stage: &'static str) -> impl FnOnce(rfprint::Error) -> CliError {
        move |source| CliError::Stage { stage, source }
    }
}

/// Library errors raised while checking configuration.
impl From<rfprint::Error> for CliError {
    fn from(e: rfprint::Error) -> Self {
        match e {
            rfprint::Error::Config(m) => CliError::Config(m),
            other => CliError::Config(other.to_string()),
        }
    }
}
