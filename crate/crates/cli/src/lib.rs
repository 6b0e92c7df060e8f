//! Config-driven experiment driver: synthesize or load a dataset, build the
//! codebook, encode histograms and STDVs, train ST-GNMF, encode the test
//! fold, classify, and report. Also parameter sweeps and encoder
//! comparisons.

// Negated float comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod cache;
pub mod config;
pub mod experiments;
pub mod pipeline;

pub use config::{PipelineConfig, SweepParam};
pub use experiments::{compare_encoders, sweep, CompareReport, Method, SweepReport};
pub use pipeline::{run_pipeline, MetricsReport, RunOptions, RunReport, Stage};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("stage `{stage}`{} failed: {source}", fold.as_ref().map(|f| format!(" (fold {f})")).unwrap_or_default())]
    Stage {
        stage: String,
        fold: Option<String>,
        #[source]
        source: stanncr::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unreadable artifact: {0}")]
    Artifact(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 for validation errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            _ => 3,
        }
    }
}
