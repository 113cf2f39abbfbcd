//! Pipeline library behind the `vmdnet` binary: configuration, CSV
//! ingestion, and the decompose / search / train / evaluate / predict stages
//! with ablation runners.

pub mod config;
pub mod gradcheck;
pub mod ingest;
pub mod pipeline;

use thiserror::Error;

/// Stage errors classified by CLI exit code: config 2, data 3, numerical 4.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numeric(_) => 4,
        }
    }
}

impl From<vmdnet_core::windowing::WindowError> for PipelineError {
    fn from(e: vmdnet_core::windowing::WindowError) -> Self {
        use vmdnet_core::windowing::WindowError as W;
        match e {
            W::BadSpec(_) | W::BadFractions(_) => PipelineError::Config(e.to_string()),
            W::Vmd { .. } | W::NonFiniteNormalization => PipelineError::Numeric(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<crate::ingest::IngestError> for PipelineError {
    fn from(e: crate::ingest::IngestError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<vmdnet_core::bilevel::SearchError> for PipelineError {
    fn from(e: vmdnet_core::bilevel::SearchError) -> Self {
        use vmdnet_core::bilevel::SearchError as S;
        match e {
            S::BadSpace(_) | S::BadConfig(_) => PipelineError::Config(e.to_string()),
            S::Io(_) => PipelineError::Data(e.to_string()),
            _ => PipelineError::Numeric(e.to_string()),
        }
    }
}
