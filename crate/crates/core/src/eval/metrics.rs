//! Sentence and corpus text-generation metrics over token sequences.

use std::collections::{HashMap, HashSet};

use super::EvalError;

type Ngrams<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Ngrams<'_> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check(candidate: &[String], references: &[Vec<String>]) -> Result<(), EvalError> {
    if candidate.is_empty() {
        return Err(EvalError::EmptyCandidate);
    }
    if references.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    Ok(())
}

/// Clipped n-gram matches and candidate n-gram totals for n = 1..4, plus
/// the candidate length and the closest reference length (shorter on ties).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new(candidate: &[String], references: &[Vec<String>]) -> Self {
        let mut s = BleuStats {
            cand_len: candidate.len(),
            ref_len: closest_ref_len(candidate.len(), references),
            ..BleuStats::default()
        };
        for n in 1..=4 {
            let cand = ngrams(candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in references {
                for (g, c) in ngrams(r, n) {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            s.matches[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            s.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            0.0
        } else if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        }
    }

    /// Geometric mean of the four precisions times the brevity penalty. With
    /// `smooth`, a zero match count for n ≥ 2 becomes 1 / (total + 1).
    pub fn score(&self, smooth: bool) -> f64 {
        if self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..4 {
            let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
            let p = if n == 0 || self.matches[n] > 0 {
                m / t
            } else if smooth {
                1.0 / (t + 1.0)
            } else {
                return 0.0;
            };
            log_sum += p.ln();
        }
        self.brevity_penalty() * (log_sum / 4.0).exp()
    }
}

fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Sentence BLEU-4 with add-one smoothing of empty higher-order precisions.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> Result<f64, EvalError> {
    check(candidate, references)?;
    Ok(BleuStats::new(candidate, references).score(true))
}

/// Corpus BLEU-4: counts summed over segments, no smoothing.
pub fn corpus_bleu4(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut total = BleuStats::default();
    for (cand, refs) in pairs {
        if refs.is_empty() {
            return Err(EvalError::EmptyReferences);
        }
        total.add(&BleuStats::new(cand, refs));
    }
    Ok(total.score(false))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1, best over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64, EvalError> {
    check(candidate, references)?;
    Ok(references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            2.0 * p * rec / (p + rec)
        })
        .fold(0.0, f64::max))
}

const SUFFIXES: [(&str, &str); 7] = [
    ("ies", "y"),
    ("ing", ""),
    ("edly", ""),
    ("ed", ""),
    ("ly", ""),
    ("es", ""),
    ("s", ""),
];

/// Strips the first matching suffix when at least three characters remain.
pub fn light_stem(word: &str) -> String {
    for (suffix, replacement) in SUFFIXES {
        if let Some(stem) = word.strip_suffix(suffix) {
            if stem.chars().count() >= 3 {
                return format!("{stem}{replacement}");
            }
        }
    }
    word.to_string()
}

/// Pairs the i-th unmatched occurrence of each key in the candidate with the
/// i-th unmatched occurrence of the same key in the reference.
fn align_stage(
    cand_keys: &[String],
    ref_keys: &[String],
    cand_used: &mut [bool],
    ref_used: &mut [bool],
    pairs: &mut Vec<(usize, usize)>,
) {
    let mut ref_slots: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, k) in ref_keys.iter().enumerate() {
        if !ref_used[j] {
            ref_slots.entry(k.as_str()).or_default().push(j);
        }
    }
    let mut next: HashMap<&str, usize> = HashMap::new();
    for (i, k) in cand_keys.iter().enumerate() {
        if cand_used[i] {
            continue;
        }
        let Some(slots) = ref_slots.get(k.as_str()) else { continue };
        let cursor = next.entry(k.as_str()).or_insert(0);
        if let Some(&j) = slots.get(*cursor) {
            *cursor += 1;
            cand_used[i] = true;
            ref_used[j] = true;
            pairs.push((i, j));
        }
    }
}

fn meteor_single(candidate: &[String], reference: &[String]) -> f64 {
    let mut cand_used = vec![false; candidate.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    align_stage(candidate, reference, &mut cand_used, &mut ref_used, &mut pairs);
    let cs: Vec<String> = candidate.iter().map(|w| light_stem(w)).collect();
    let rs: Vec<String> = reference.iter().map(|w| light_stem(w)).collect();
    align_stage(&cs, &rs, &mut cand_used, &mut ref_used, &mut pairs);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    pairs.sort_unstable();
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// METEOR with exact and light-stem matching only (no synonym stage),
/// best over references.
pub fn meteor(candidate: &[String], references: &[Vec<String>]) -> Result<f64, EvalError> {
    check(candidate, references)?;
    Ok(references
        .iter()
        .map(|r| meteor_single(candidate, r))
        .fold(0.0, f64::max))
}

/// Per-sample CIDEr values and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

fn tfidf<'a>(counts: &Ngrams<'a>, df: &HashMap<&'a [String], usize>, n_docs: f64) -> HashMap<&'a [String], f64> {
    counts
        .iter()
        .map(|(g, &c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (*g, c as f64 * (n_docs / d).ln())
        })
        .collect()
}

fn cosine_sparse(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Plain CIDEr: TF-IDF vectors of n-grams (n = 1..4), IDF = ln(N / df)
/// with df counted over each sample's reference set, cosine averaged over
/// references and then over n, times 10.
pub fn cider(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> Result<CiderScores, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if pairs.iter().any(|(_, refs)| refs.is_empty()) {
        return Err(EvalError::EmptyReferences);
    }
    let n_docs = pairs.len() as f64;
    let mut per_sample = vec![0.0; pairs.len()];
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for (_, refs) in pairs {
            let seen: HashSet<&[String]> = refs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (k, (cand, refs)) in pairs.iter().enumerate() {
            let vc = tfidf(&ngrams(cand, n), &df, n_docs);
            let mean_cos = refs
                .iter()
                .map(|r| cosine_sparse(&vc, &tfidf(&ngrams(r, n), &df, n_docs)))
                .sum::<f64>()
                / refs.len() as f64;
            per_sample[k] += mean_cos / 4.0;
        }
    }
    per_sample.iter_mut().for_each(|s| *s *= 10.0);
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CiderScores { mean, per_sample })
}
