//! The evaluation suite over a test split and its report formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::metrics::{cider, corpus_bleu4, meteor, rouge_l};
use super::ranking::{mrr, rank_feedback, recall_at_k};
use super::similarity::{EmbeddingProvider, Provenance, Similarity};
use super::EvalError;
use crate::data::{normalize_text, tokenize, Sample, Vocabulary};
use crate::model::{generate_greedy, Model, ModelError};
use crate::training::{encode_source, RegionLookup};

type SentenceMetric = fn(&[String], &[Vec<String>]) -> Result<f64, EvalError>;

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 7];

/// Produces one feedback text per article.
pub trait FeedbackGenerator {
    fn generate(&self, sample: &Sample) -> Result<String, EvalError>;
}

/// Greedy decoding with a trained model.
pub struct GreedyGenerator<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub regions: &'a RegionLookup,
}

impl FeedbackGenerator for GreedyGenerator<'_> {
    fn generate(&self, sample: &Sample) -> Result<String, EvalError> {
        let src = encode_source(self.vocab, sample, self.model.config.max_text_len);
        let rfs = if self.model.config.ablation.uses_visual() {
            let r = self
                .regions
                .get(&sample.image_ref)
                .ok_or_else(|| ModelError::MissingRegions(sample.image_ref.clone()))?;
            Some(r)
        } else {
            None
        };
        let ids = generate_greedy(self.model, &src, rfs)?;
        Ok(self.vocab.decode(&ids))
    }
}

/// Metric tokens: normalized and tokenized.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize(&normalize_text(text))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleResult {
    pub id: String,
    pub generated: String,
    pub rank: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub provider: Provenance,
    pub n_samples: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub mrr: f64,
    /// k → percentage.
    pub recall_at: BTreeMap<usize, f64>,
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl EvalReport {
    /// Metric name/value pairs in table column order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("bleu4".to_string(), self.bleu4),
            ("rouge_l".to_string(), self.rouge_l),
            ("meteor".to_string(), self.meteor),
            ("cider".to_string(), self.cider),
            ("mrr".to_string(), self.mrr),
        ];
        out.extend(self.recall_at.iter().map(|(k, v)| (format!("recall@{k}"), *v)));
        out
    }

    /// Header and one row: the metrics followed by `provider,n_samples`.
    pub fn to_csv(&self) -> String {
        let m = self.metrics();
        let mut header: Vec<String> = m.iter().map(|(k, _)| k.clone()).collect();
        header.extend(["provider".to_string(), "n_samples".to_string()]);
        let mut row: Vec<String> = m.iter().map(|(_, v)| format!("{v:.6}")).collect();
        row.extend([self.provider.to_string(), self.n_samples.to_string()]);
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    pub fn to_table(&self) -> String {
        let m = self.metrics();
        let width = m.iter().map(|(k, _)| k.len().max(8)).collect::<Vec<_>>();
        let mut s = String::new();
        let _ = writeln!(s, "provider: {}  samples: {}", self.provider, self.n_samples);
        for ((k, _), w) in m.iter().zip(&width) {
            let _ = write!(s, "{k:>w$}  ");
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        for ((_, v), w) in m.iter().zip(&width) {
            let _ = write!(s, "{v:>w$.4}  ");
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    }
}

/// Generates feedback for every sample with at least one comment and scores
/// it against that sample's comments. BLEU-4 is aggregated at corpus level,
/// ROUGE-L and METEOR are averaged per sample, CIDEr uses the test split as
/// its IDF corpus.
pub fn evaluate_suite(
    generator: &dyn FeedbackGenerator,
    samples: &[Sample],
    provider: &dyn EmbeddingProvider,
    similarity: Similarity,
    ks: &[usize],
) -> Result<(EvalReport, Vec<SampleResult>), EvalError> {
    let mut pairs = Vec::new();
    let mut results = Vec::new();
    for s in samples.iter().filter(|s| !s.comments.is_empty()) {
        let generated = generator.generate(s)?;
        let refs: Vec<Vec<String>> = s.comments.iter().map(|c| metric_tokens(&c.text)).collect();
        pairs.push((metric_tokens(&generated), refs));
        let (rank, sim) = rank_feedback(&generated, &s.comments, provider, similarity)?;
        results.push(SampleResult { id: s.id.clone(), generated, rank, similarity: sim });
    }
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let n = pairs.len() as f64;
    let mean_of = |f: SentenceMetric| -> Result<f64, EvalError> {
        let mut total = 0.0;
        for (c, r) in &pairs {
            if !c.is_empty() {
                total += f(c, r)?;
            }
        }
        Ok(total / n)
    };
    let rouge = mean_of(rouge_l)?;
    let met = mean_of(meteor)?;
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, recall_at_k(&ranks, k)?);
    }
    let report = EvalReport {
        provider: provider.provenance(),
        n_samples: results.len(),
        bleu4: corpus_bleu4(&pairs)?,
        rouge_l: rouge,
        meteor: met,
        cider: cider(&pairs)?.mean,
        mrr: mrr(&ranks)?,
        recall_at,
    };
    Ok((report, results))
}

const EXCERPT_WORDS: usize = 30;

/// Human-evaluation sheet: one row per sample with blank score columns.
pub fn worksheet_csv(samples: &[Sample], generated: &[String]) -> Result<String, EvalError> {
    if samples.len() != generated.len() {
        return Err(EvalError::DimMismatch { left: samples.len(), right: generated.len() });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "id", "text_excerpt", "image_ref", "top_comment", "generated_feedback",
        "s_ct", "s_ci", "s_ft", "s_fi", "s_cf",
    ];
    w.write_record(header).map_err(EvalError::from)?;
    for (s, g) in samples.iter().zip(generated) {
        let excerpt = s.text.split_whitespace().take(EXCERPT_WORDS).collect::<Vec<_>>().join(" ");
        let top = s.top_comment().map(|c| c.text.as_str()).unwrap_or("");
        w.write_record([s.id.as_str(), &excerpt, &s.image_ref, top, g, "", "", "", "", ""])
            .map_err(EvalError::from)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
