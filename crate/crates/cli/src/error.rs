use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: gradstack::Error,
    },
    #[error("gradient check failed: {0}")]
    GradientCheck(String),
    #[error("all {attempts} attempts diverged; last learning rate {last_rate:e}")]
    RetriesExhausted { attempts: usize, last_rate: f64 },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] gradstack::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn stage(stage: &str) -> impl FnOnce(gradstack::Error) -> CliError + '_ {
        move |source| CliError::Stage {
            stage: stage.to_owned(),
            source,
        }
    }

    /// 2 config, 3 divergence, 4 gradient check, 5 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::RetriesExhausted { .. } => 3,
            CliError::GradientCheck(_) => 4,
            CliError::Io(_) => 5,
            CliError::Stage { source, .. } | CliError::Core(source) => core_code(source),
        }
    }
}

fn core_code(e: &gradstack::Error) -> i32 {
    use gradstack::Error as E;
    match e {
        _ if e.is_divergence() => 3,
        E::NonFiniteGradient(_) => 3,
        E::Io(_) | E::Parse { .. } | E::Json(_) => 5,
        E::InvalidSpec(_) => 2,
        E::Level { source, .. } => core_code(source),
        _ => 1,
    }
}
