use std::path::{Path, PathBuf};

use msfa::error::MsfaError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Model(#[from] MsfaError),

    /// A pipeline stage failed; `stage` names it on stderr.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for bad input or unusable files, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Model(e) => {
                if e.is_numerical() {
                    3
                } else {
                    2
                }
            }
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<CliError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CliError::Stage { stage, source: Box::new(e.into()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::input("x").exit_code(), 2);
        assert_eq!(CliError::from(MsfaError::numerical("x")).exit_code(), 3);
        let staged: Result<()> = Err(MsfaError::numerical("x")).stage("sample");
        let err = staged.unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().starts_with("stage `sample` failed"));
    }
}
