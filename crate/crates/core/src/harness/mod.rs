//! Experiment orchestration: configuration, condition presets, rendering, cached
//! model queries, grading and report artifacts.

mod cache;
mod config;
mod presets;
mod run;

pub use cache::{reply_key, CachedReply, ReplyCache, ReplyLog, CACHE_FILE};
pub use config::{DatasetConfig, DefenseConfig, EndpointConfig, ExperimentConfig, GridConfig};
pub use presets::{preset, Preset, PRESET_NAMES};
pub use run::{
    build_models, prepare_datasets, regrade, render_all, run, run_with_models, write_artifacts, Plan,
    QueryStats, RunOutcome, CONFIG_FILE, META_FILE, PLAN_FILE, REPORT_FILE, SUMMARY_FILE,
};

use std::path::PathBuf;

use crate::corpus::CorpusError;
use crate::watermark::RenderError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown preset {0:?} (expected one of: {})", PRESET_NAMES.join(", "))]
    UnknownPreset(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid run plan: {0}")]
    Plan(String),
    #[error("authentication failed, run stopped: {0}")]
    Auth(String),
    #[error("run stopped: {0}")]
    Aborted(String),
}

impl HarnessError {
    /// Process exit code: 1 for validation problems, 2 for transport and
    /// authentication failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Auth(_) | HarnessError::Aborted(_) => 2,
            _ => 1,
        }
    }
}
