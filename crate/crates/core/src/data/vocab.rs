use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{normalize_text, tokenize, DataError, Sample};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id mapping. Ids 0..4 are reserved for PAD, BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    min_frequency: usize,
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;

    fn try_from(f: VocabFile) -> Result<Self, String> {
        Vocabulary::from_tokens(f.tokens, f.min_frequency)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            min_frequency: v.min_frequency,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its full token list, reserved entries first.
    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary must start with <pad> <bos> <eos> <unk>".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary token `{t}`"));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            min_frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Normalizes, tokenizes and maps `text`, keeping at most `max_len` ids.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        tokenize(&normalize_text(text))
            .iter()
            .take(max_len)
            .map(|t| self.id(t))
            .collect()
    }

    /// Like [`encode`](Self::encode) but framed as `BOS … EOS`; the frame
    /// counts towards `max_len` (which must be at least 2).
    pub fn encode_comment(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS_ID);
        ids.extend(self.encode(text, max_len.saturating_sub(2)));
        ids.push(EOS_ID);
        ids
    }

    /// Tokens for `ids`, skipping PAD and BOS and stopping at the first EOS.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .take_while(|&id| id != EOS_ID)
            .filter(|&id| id != PAD_ID && id != BOS_ID)
            .map(|id| self.token(id).unwrap_or(RESERVED[UNK_ID]).to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }
}

/// Counts tokens over titles, bodies and comments and keeps those seen at
/// least `min_frequency` times, ordered by descending count then
/// lexicographically.
pub fn build_vocab(samples: &[Sample], min_frequency: usize) -> Result<Vocabulary, DataError> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for s in samples {
        let texts = [s.title.as_str(), s.text.as_str()]
            .into_iter()
            .chain(s.comments.iter().map(|c| c.text.as_str()));
        for text in texts {
            for tok in tokenize(&normalize_text(text)) {
                any = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(DataError::EmptyCorpus);
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_frequency && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocabulary::from_tokens(tokens, min_frequency).expect("reserved prefix and unique tokens"))
}
