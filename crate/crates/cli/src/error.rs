use cvqd_core::Error as CoreError;

/// Failure classes, each with a fixed process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("physics precondition failed: {0}")]
    Physics(String),
    #[error("I/O or format error: {0}")]
    Io(String),
    #[error("verification failed: {0} check(s) out of bounds")]
    Verify(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Config(_) => 2,
            CliError::Physics(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_)
            | CoreError::InvalidCutoff(_)
            | CoreError::CutoffMismatch(..)
            | CoreError::OutOfRange(_)
            | CoreError::Timestep { .. }
            | CoreError::Shape(_) => CliError::Config(msg),
            CoreError::CutoffTooSmall(_)
            | CoreError::OutOfCutoff { .. }
            | CoreError::DegenerateState(_)
            | CoreError::InvalidState(_)
            | CoreError::NotPsd { .. }
            | CoreError::NonFinite(_) => CliError::Physics(msg),
            CoreError::Format(_) => CliError::Io(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
