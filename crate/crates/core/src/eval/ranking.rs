//! Like-rank of the comment most similar to a generated feedback.

use super::similarity::{EmbeddingProvider, Similarity};
use super::EvalError;
use crate::data::Comment;

/// Comment indices ordered by likes, most liked first; ties keep input order.
pub fn like_order(comments: &[Comment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..comments.len()).collect();
    order.sort_by(|&a, &b| comments[b].likes.cmp(&comments[a].likes));
    order
}

/// Embeds the feedback and every comment, and returns the 1-based like-rank
/// of the most similar comment together with its similarity. Among equally
/// similar comments the better-ranked one wins.
pub fn rank_feedback(
    feedback: &str,
    comments: &[Comment],
    provider: &dyn EmbeddingProvider,
    similarity: Similarity,
) -> Result<(usize, f64), EvalError> {
    if comments.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let f = provider.embed(feedback)?;
    let mut best: Option<(usize, f64)> = None;
    for (pos, &i) in like_order(comments).iter().enumerate() {
        let s = similarity.apply(&f, &provider.embed(&comments[i].text)?)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((pos + 1, s));
        }
    }
    Ok(best.expect("comments are non-empty"))
}

fn check_ranks(ranks: &[usize]) -> Result<(), EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if ranks.contains(&0) {
        return Err(EvalError::InvalidRank);
    }
    Ok(())
}

/// Mean of 1 / rank, summed in rank order so the value depends only on
/// the multiset of ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64, EvalError> {
    check_ranks(ranks)?;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(sorted.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Percentage of ranks that are at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    check_ranks(ranks)?;
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::similarity::Provenance;
    use proptest::prelude::*;
    use std::collections::HashMap;

    struct Table(HashMap<&'static str, Vec<f32>>);

    impl EmbeddingProvider for Table {
        fn embed(&self, text: &str) -> Result<Vec<f32>, EvalError> {
            self.0.get(text).cloned().ok_or_else(|| EvalError::MissingEmbedding(text.into()))
        }
        fn dim(&self) -> usize {
            2
        }
        fn provenance(&self) -> Provenance {
            Provenance::ExternalFile
        }
    }

    fn comments() -> Vec<Comment> {
        vec![Comment::new("c", 3), Comment::new("a", 9), Comment::new("b", 5), Comment::new("d", 1)]
    }

    fn table(scale: f32) -> Table {
        let mut m = HashMap::new();
        for (k, v) in [("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [1.0, 1.0]), ("d", [-1.0, 0.2]), ("f", [1.0, 1.1])] {
            m.insert(k, vec![v[0] * scale, v[1] * scale]);
        }
        Table(m)
    }

    #[test]
    fn third_ranked_comment() {
        let (rank, score) = rank_feedback("f", &comments(), &table(1.0), Similarity::Cosine).unwrap();
        assert_eq!(rank, 3);
        assert!(score > 0.99);
        assert_eq!(mrr(&[rank]).unwrap(), 1.0 / 3.0);
        let (rank, _) = rank_feedback("f", &comments(), &table(7.5), Similarity::Cosine).unwrap();
        assert_eq!(rank, 3);
    }

    #[test]
    fn like_ties_keep_input_order() {
        let cs = vec![Comment::new("x", 2), Comment::new("y", 2), Comment::new("z", 4)];
        assert_eq!(like_order(&cs), vec![2, 0, 1]);
        let mut m = HashMap::new();
        m.insert("x", vec![1.0, 0.0]);
        m.insert("y", vec![1.0, 0.0]);
        m.insert("z", vec![0.0, 1.0]);
        m.insert("f", vec![1.0, 0.0]);
        assert_eq!(rank_feedback("f", &cs, &Table(m), Similarity::Cosine).unwrap().0, 2);
    }

    #[test]
    fn errors_propagate() {
        assert!(rank_feedback("f", &[], &table(1.0), Similarity::Cosine).is_err());
        assert!(rank_feedback("zz", &comments(), &table(1.0), Similarity::Cosine).is_err());
    }

    #[test]
    fn rank_metric_cases() {
        assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert!((mrr(&[1, 2, 4]).unwrap() - 0.583_333_333_333).abs() < 1e-9);
        assert_eq!(recall_at_k(&[2], 3).unwrap(), 100.0);
        assert_eq!(recall_at_k(&[2], 1).unwrap(), 0.0);
        assert!((recall_at_k(&[1, 5, 9], 5).unwrap() - 66.666_666_666).abs() < 1e-6);
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0]).is_err());
        assert!(recall_at_k(&[1], 0).is_err());
    }

    proptest! {
        #[test]
        fn rank_metrics_permutation_invariant(
            ranks in prop::collection::vec(1usize..10, 1..20),
            k in 1usize..10,
        ) {
            let mut rev = ranks.clone();
            rev.reverse();
            prop_assert_eq!(mrr(&ranks).unwrap(), mrr(&rev).unwrap());
            prop_assert_eq!(recall_at_k(&ranks, k).unwrap(), recall_at_k(&rev, k).unwrap());
            let m = mrr(&ranks).unwrap();
            prop_assert!(m > 0.0 && m <= 1.0);
        }
    }
}
