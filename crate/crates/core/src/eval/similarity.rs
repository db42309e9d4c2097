//! Vector similarity, the distillation objective and embedding providers.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::EvalError;
use crate::data::{Vocabulary, UNK_ID};
use crate::model::{encode_text, Ctx, Model};
use crate::tensor::Tape;

fn check_dims(a: &[f32], b: &[f32]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// a·b / (‖a‖‖b‖).
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, EvalError> {
    check_dims(a, b)?;
    let na = dot64(a, a).sqrt();
    let nb = dot64(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok(dot64(a, b) / (na * nb))
}

/// Unnormalized a·b.
pub fn dot_similarity(a: &[f32], b: &[f32]) -> Result<f64, EvalError> {
    check_dims(a, b)?;
    Ok(dot64(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

impl Similarity {
    pub fn apply(self, a: &[f32], b: &[f32]) -> Result<f64, EvalError> {
        match self {
            Similarity::Cosine => cosine_similarity(a, b),
            Similarity::Dot => dot_similarity(a, b),
        }
    }
}

/// Embeddings of one comment/feedback pair under the teacher and the student.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTriple {
    pub teacher_comment: Vec<f32>,
    pub student_comment: Vec<f32>,
    pub student_feedback: Vec<f32>,
}

/// Mean over triples of ‖M̂(c) − M(c)‖² + ‖M̂(f) − M(c)‖².
pub fn distillation_loss(triples: &[DistillTriple]) -> Result<f64, EvalError> {
    if triples.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let d = triples[0].teacher_comment.len();
    let mut total = 0.0;
    for t in triples {
        let m = &t.teacher_comment;
        if m.len() != d {
            return Err(EvalError::DimMismatch { left: d, right: m.len() });
        }
        check_dims(m, &t.student_comment)?;
        check_dims(m, &t.student_feedback)?;
        let sq = |v: &[f32]| -> f64 {
            v.iter().zip(m).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
        };
        total += sq(&t.student_comment) + sq(&t.student_feedback);
    }
    Ok(total / triples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ModelEncoder,
    ExternalFile,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::ModelEncoder => "model-encoder",
            Provenance::ExternalFile => "external-file",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Deterministic text → vector map of fixed width.
pub trait EmbeddingProvider {
    fn embed(&self, text: &str) -> Result<Vec<f32>, EvalError>;
    fn dim(&self) -> usize;
    fn provenance(&self) -> Provenance;
}

/// Mean of the encoder's per-token outputs over non-PAD positions.
pub struct EncoderEmbeddings<'a> {
    model: &'a Model,
    vocab: &'a Vocabulary,
}

impl<'a> EncoderEmbeddings<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocabulary) -> Self {
        EncoderEmbeddings { model, vocab }
    }
}

impl EmbeddingProvider for EncoderEmbeddings<'_> {
    fn embed(&self, text: &str) -> Result<Vec<f32>, EvalError> {
        let mut ids = self.vocab.encode(text, self.model.config.max_text_len);
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, self.model, None);
        let enc = encode_text(&mut ctx, &ids)?;
        let z = tape.value(enc.z_star);
        let d = z.cols();
        let mut acc = vec![0.0f64; d];
        let mut n = 0usize;
        for (r, &pad) in enc.pad_mask.iter().enumerate() {
            if !pad {
                acc.iter_mut().zip(z.row(r)).for_each(|(a, &v)| *a += v as f64);
                n += 1;
            }
        }
        Ok(acc.into_iter().map(|a| (a / n.max(1) as f64) as f32).collect())
    }

    fn dim(&self) -> usize {
        self.model.config.d_model
    }

    fn provenance(&self) -> Provenance {
        Provenance::ModelEncoder
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    text_sha256: String,
    vector: Vec<f32>,
}

/// Lowercase hex SHA-256 of the UTF-8 bytes of `text`.
pub fn text_sha256(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Precomputed vectors keyed by the SHA-256 of each text.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl ExternalEmbeddings {
    /// Parses newline-delimited `{"text_sha256", "vector"}` records.
    pub fn parse(input: &str) -> Result<Self, EvalError> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| EvalError::Embeddings { line: i + 1, message };
            let rec: EmbeddingRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if rec.vector.is_empty() {
                return Err(bad("empty vector".into()));
            }
            let d = *dim.get_or_insert(rec.vector.len());
            if rec.vector.len() != d {
                return Err(bad(format!("vector has {} components, expected {d}", rec.vector.len())));
            }
            let key = rec.text_sha256.to_ascii_lowercase();
            if vectors.insert(key, rec.vector).is_some() {
                return Err(bad(format!("duplicate text_sha256 {}", rec.text_sha256)));
            }
        }
        let dim = dim.ok_or(EvalError::EmptyCorpus)?;
        Ok(ExternalEmbeddings { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let s = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&s)
    }
}

impl EmbeddingProvider for ExternalEmbeddings {
    fn embed(&self, text: &str) -> Result<Vec<f32>, EvalError> {
        let key = text_sha256(text);
        self.vectors
            .get(&key)
            .cloned()
            .ok_or(EvalError::MissingEmbedding(key))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn provenance(&self) -> Provenance {
        Provenance::ExternalFile
    }
}
