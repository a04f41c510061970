//! Training-free zero- and few-shot anomaly detection over precomputed
//! vision-language embeddings.
//!
//! The engine reads embedding bundles (`.alfb`), adapts a vanilla prompt
//! pool to each image, aligns global prompt prototypes to local patch
//! features, and produces image scores, pixel maps and evaluation metrics.

pub mod aligner;
pub mod embeddings;
pub mod grid;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod rtp;
pub mod scoring;
pub mod synth;
pub mod tensor_io;
pub mod vector;

pub use embeddings::{EmbeddedPromptSet, ImageEmbeddings};
pub use grid::Grid;
pub use pipeline::{score_batch, score_image, ImageScore, PipelineConfig};
pub use tensor_io::Bundle;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Bundle(#[from] tensor_io::BundleError),
    #[error(transparent)]
    Prompt(#[from] prompts::PromptError),
    #[error(transparent)]
    Rtp(#[from] rtp::RtpError),
    #[error(transparent)]
    Align(#[from] aligner::AlignError),
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
    #[error(transparent)]
    Memory(#[from] memory::MemoryError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
}

pub type Result<T> = std::result::Result<T, Error>;
