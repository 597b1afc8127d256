use std::path::PathBuf;

use thiserror::Error;

/// Coverage of one asset on the hourly grid, reported when ingestion rejects it.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetCoverage {
    pub asset: String,
    pub coverage: f64,
    pub longest_gap: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("record {row}: {reason}")]
    Record { row: usize, reason: String },

    #[error("assets failed the coverage check: {}", format_coverage(.0))]
    Coverage(Vec<AssetCoverage>),

    #[error("zero variance in {0}")]
    ZeroVariance(String),

    #[error("asset {asset}: {reason}")]
    Asset { asset: String, reason: String },

    #[error("chunk keys differ between score sets; missing: {}", .0.join(", "))]
    KeyMismatch(Vec<String>),

    #[error("no common entities between claims and market data")]
    EmptyIntersection,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn format_coverage(items: &[AssetCoverage]) -> String {
    items
        .iter()
        .map(|c| {
            format!(
                "{} ({:.1}% coverage, longest gap {}h)",
                c.asset,
                100.0 * c.coverage,
                c.longest_gap
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Bad input or configuration, as opposed to a failure while computing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::InvalidArgument { .. }
            | Error::Record { .. }
            | Error::Coverage(_)
            | Error::KeyMismatch(_)
            | Error::EmptyIntersection
            | Error::Config(_)
            | Error::Csv(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
