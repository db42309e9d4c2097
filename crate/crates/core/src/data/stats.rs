use serde::Serialize;

use super::Sample;

/// Corpus-level counts and means. Every (article, comment) pair is one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_articles: usize,
    pub n_samples: usize,
    pub avg_comments_per_article: f64,
    pub avg_likes_per_comment: f64,
    pub avg_text_len_words: f64,
    pub avg_comment_len_words: f64,
}

fn words(s: &str) -> usize {
    s.split_whitespace().count()
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Word lengths count whitespace-separated words.
pub fn corpus_stats(samples: &[Sample]) -> CorpusStats {
    let n_articles = samples.len();
    let n_samples: usize = samples.iter().map(|s| s.comments.len()).sum();
    let comments = || samples.iter().flat_map(|s| &s.comments);
    let likes: f64 = comments().map(|c| c.likes as f64).sum();
    let comment_words: f64 = comments().map(|c| words(&c.text) as f64).sum();
    let text_words: f64 = samples.iter().map(|s| words(&s.text) as f64).sum();
    CorpusStats {
        n_articles,
        n_samples,
        avg_comments_per_article: mean(n_samples as f64, n_articles),
        avg_likes_per_comment: mean(likes, n_samples),
        avg_text_len_words: mean(text_words, n_articles),
        avg_comment_len_words: mean(comment_words, n_samples),
    }
}

impl CorpusStats {
    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("No. of news articles", self.n_articles.to_string()),
            ("No. of samples", self.n_samples.to_string()),
            ("Avg. comments per article", format!("{:.2}", self.avg_comments_per_article)),
            ("Avg. likes per comment", format!("{:.2}", self.avg_likes_per_comment)),
            ("Avg. length of text (words)", format!("{:.2}", self.avg_text_len_words)),
            ("Avg. length of comments (words)", format!("{:.2}", self.avg_comment_len_words)),
        ];
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<w$}  {v}\n"))
            .collect()
    }
}
