//! Diagnostics over tensor dumps: attention variation maps, embedding cosine
//! similarity, exact t-SNE, and their PNG/CSV renderings.

mod batch;
mod delta;
mod embedding;
mod plot;
mod tsne;

pub use batch::{analyze_dir, AnalysisSummary, AnalyzeOptions, AttentionRow, CosineRow, TsneOutcome};
pub use delta::{attention_delta, attention_delta_with, percentile, AttentionDelta, HeadAggregation};
pub use embedding::{cosine_similarity, cosine_similarity_slices, EmbeddingSummary};
pub use plot::{render_heatmap, render_scatter, write_scatter_csv, HeatmapMeta, COLORMAP};
pub use tsne::{joint_probabilities, tsne, TsneConfig, TsneResult};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("dump mismatch: {0}")]
    Mismatch(String),
    #[error("expected a {expected} dump, got {found}")]
    Kind {
        expected: crate::tdump::DumpKind,
        found: crate::tdump::DumpKind,
    },
    #[error("vectors have different dimensions ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("invalid t-SNE input: {0}")]
    Tsne(String),
    #[error("nothing to render: {0}")]
    Empty(String),
    #[error("image encoding failed: {0}")]
    Image(String),
    #[error("{path}: {source}")]
    Dump {
        path: PathBuf,
        source: crate::tdump::TdumpError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl AnalysisError {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| AnalysisError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
