//! Corpus ingestion: canonical NDJSON records, the legacy colon-joined CSV,
//! text normalization, tokenization, vocabulary, splits and corpus statistics.

mod legacy;
mod normalize;
mod records;
mod split;
mod stats;
mod vocab;

pub use legacy::{parse_legacy_csv, parse_legacy_reader, LegacyParse, RejectedRow};
pub use normalize::{normalize_sample, normalize_text, tokenize};
pub use records::{parse_records, read_records, records_to_string, write_records};
pub use split::{filter_by_range, split_dataset, Fold, SplitMode};
pub use stats::{corpus_stats, CorpusStats};
pub use vocab::{build_vocab, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown split mode `{0}` (expected holdout80_20, kfold5, low, mid, high or all)")]
    UnknownSplitMode(String),
    #[error("{mode} needs at least {needed} articles, got {got}")]
    TooFewArticles {
        mode: &'static str,
        needed: usize,
        got: usize,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comment {
    pub text: String,
    pub likes: u64,
}

impl Comment {
    pub fn new(text: impl Into<String>, likes: u64) -> Self {
        Comment {
            text: text.into(),
            likes,
        }
    }
}

/// One news article with its reader comments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub title: String,
    /// News body.
    pub text: String,
    /// Key into the region-feature file.
    pub image_ref: String,
    pub comments: Vec<Comment>,
}

impl Sample {
    /// The most-liked comment; the earliest wins ties.
    pub fn top_comment(&self) -> Option<&Comment> {
        let mut best: Option<&Comment> = None;
        for c in &self.comments {
            if best.is_none_or(|b| c.likes > b.likes) {
                best = Some(c);
            }
        }
        best
    }

    /// Title and body as the single text fed to the encoder.
    pub fn source_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else if self.text.is_empty() {
            self.title.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}
