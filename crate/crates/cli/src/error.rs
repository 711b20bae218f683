use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] psar::Error),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("{path}: row {row}, column {column}: {message}")]
    Cell {
        path: PathBuf,
        /// 1-based data row, not counting the header.
        row: usize,
        column: String,
        message: String,
    },
    #[error("archive {path}: {message}")]
    Archive { path: PathBuf, message: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Machine-readable form written to `error.json` and stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<psar::sampler::ChainState>,
}

impl CliError {
    pub fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn archive(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Archive {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let mut r = ErrorRecord {
            kind: String::new(),
            message: self.to_string(),
            problems: vec![],
            row: None,
            column: None,
            state: None,
        };
        match self {
            CliError::Model(e) => {
                r.kind = e.kind().to_string();
                if let psar::Error::Sampler { state: Some(s), .. } = e {
                    r.state = Some((**s).clone());
                }
            }
            CliError::Config(p) => {
                r.kind = "config".into();
                r.problems = p.clone();
            }
            CliError::File { .. } => r.kind = "io".into(),
            CliError::Cell { row, column, .. } => {
                r.kind = "data".into();
                r.row = Some(*row);
                r.column = Some(column.clone());
            }
            CliError::Archive { .. } => r.kind = "archive".into(),
        }
        r
    }
}
