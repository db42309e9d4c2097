//! Generation metrics, embedding similarity and like-rank retrieval metrics.
//!
//! METEOR here is METEOR-base: exact and light-stem matching, no synonym
//! stage. CIDEr is the plain formulation (no length penalty or clipping).
//! SPICE is not provided.

mod metrics;
mod ranking;
mod report;
mod similarity;

use thiserror::Error;

use crate::model::ModelError;

pub use metrics::{bleu4, cider, corpus_bleu4, light_stem, meteor, rouge_l, BleuStats, CiderScores};
pub use ranking::{like_order, mrr, rank_feedback, recall_at_k};
pub use report::{
    evaluate_suite, metric_tokens, worksheet_csv, EvalReport, FeedbackGenerator, GreedyGenerator, SampleResult,
    DEFAULT_KS,
};
pub use similarity::{
    cosine_similarity, distillation_loss, dot_similarity, text_sha256, DistillTriple, EmbeddingProvider,
    EncoderEmbeddings, ExternalEmbeddings, Provenance, Similarity,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("candidate is empty")]
    EmptyCandidate,
    #[error("no references")]
    EmptyReferences,
    #[error("nothing to evaluate")]
    EmptyCorpus,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("ranks start at 1")]
    InvalidRank,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no embedding for text with sha256 {0}")]
    MissingEmbedding(String),
    #[error("embeddings line {line}: {message}")]
    Embeddings { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<csv::Error> for EvalError {
    fn from(e: csv::Error) -> Self {
        EvalError::Csv(e.to_string())
    }
}
