use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Seeded 80/20 split by article.
    #[serde(rename = "holdout80_20")]
    Holdout80_20,
    /// Five disjoint folds by article.
    Kfold5,
    /// Articles with at most 5 comments, then an 80/20 holdout.
    Low,
    /// Articles with 13 to 50 comments, then an 80/20 holdout.
    Mid,
    /// Articles with more than 30 comments, then an 80/20 holdout.
    High,
    /// Every article in both train and test.
    All,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Holdout80_20 => "holdout80_20",
            SplitMode::Kfold5 => "kfold5",
            SplitMode::Low => "low",
            SplitMode::Mid => "mid",
            SplitMode::High => "high",
            SplitMode::All => "all",
        }
    }

    /// Whether an article with `n_comments` comments belongs to the subset.
    /// Mid and high overlap on 31..=50.
    pub fn admits(self, n_comments: usize) -> bool {
        match self {
            SplitMode::Low => n_comments <= 5,
            SplitMode::Mid => (13..=50).contains(&n_comments),
            SplitMode::High => n_comments > 30,
            _ => true,
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        Ok(match s {
            "holdout80_20" => SplitMode::Holdout80_20,
            "kfold5" => SplitMode::Kfold5,
            "low" => SplitMode::Low,
            "mid" => SplitMode::Mid,
            "high" => SplitMode::High,
            "all" => SplitMode::All,
            other => return Err(DataError::UnknownSplitMode(other.to_string())),
        })
    }
}

/// Sample indices of one train/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Indices of the samples admitted by a comment-range mode.
pub fn filter_by_range(samples: &[Sample], mode: SplitMode) -> Vec<usize> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| mode.admits(s.comments.len()))
        .map(|(i, _)| i)
        .collect()
}

fn holdout(mut idx: Vec<usize>, rng: &mut ChaCha8Rng) -> Fold {
    idx.shuffle(rng);
    let n_test = (idx.len() as f64 * 0.2).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Fold { train, test }
}

/// Partitions samples by article. Holdout and range modes return one fold,
/// `kfold5` returns five; index lists are sorted.
pub fn split_dataset(samples: &[Sample], mode: SplitMode, seed: u64) -> Result<Vec<Fold>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..samples.len()).collect();
    Ok(match mode {
        SplitMode::All => vec![Fold {
            train: all.clone(),
            test: all,
        }],
        SplitMode::Holdout80_20 => vec![holdout(all, &mut rng)],
        SplitMode::Low | SplitMode::Mid | SplitMode::High => {
            vec![holdout(filter_by_range(samples, mode), &mut rng)]
        }
        SplitMode::Kfold5 => {
            if samples.len() < 5 {
                return Err(DataError::TooFewArticles {
                    mode: "kfold5",
                    needed: 5,
                    got: samples.len(),
                });
            }
            let mut idx = all;
            idx.shuffle(&mut rng);
            (0..5)
                .map(|k| {
                    let mut test = Vec::new();
                    let mut train = Vec::new();
                    for (pos, &i) in idx.iter().enumerate() {
                        if pos % 5 == k {
                            test.push(i);
                        } else {
                            train.push(i);
                        }
                    }
                    test.sort_unstable();
                    train.sort_unstable();
                    Fold { train, test }
                })
                .collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Comment;
    use proptest::prelude::*;

    fn with_comments(counts: &[usize]) -> Vec<Sample> {
        counts
            .iter()
            .enumerate()
            .map(|(i, &n)| Sample {
                id: i.to_string(),
                title: String::new(),
                text: String::new(),
                image_ref: String::new(),
                comments: (0..n).map(|j| Comment::new(format!("c{j}"), 0)).collect(),
            })
            .collect()
    }

    #[test]
    fn comment_ranges() {
        assert!(SplitMode::Mid.admits(20) && !SplitMode::Low.admits(20));
        assert!(SplitMode::Mid.admits(40) && SplitMode::High.admits(40));
        assert!(SplitMode::Low.admits(5) && !SplitMode::Low.admits(6));
        assert!(!SplitMode::Mid.admits(12) && SplitMode::Mid.admits(13) && SplitMode::Mid.admits(50));
        assert!(!SplitMode::High.admits(30) && SplitMode::High.admits(31));
        let s = with_comments(&[1, 20, 40, 60]);
        assert_eq!(filter_by_range(&s, SplitMode::Mid), [1, 2]);
        assert_eq!(filter_by_range(&s, SplitMode::High), [2, 3]);
    }

    #[test]
    fn holdout_ratio() {
        let s = with_comments(&[1; 10]);
        let f = &split_dataset(&s, SplitMode::Holdout80_20, 7).unwrap()[0];
        assert_eq!((f.train.len(), f.test.len()), (8, 2));
    }

    #[test]
    fn parse_modes() {
        for m in ["holdout80_20", "kfold5", "low", "mid", "high", "all"] {
            assert_eq!(m.parse::<SplitMode>().unwrap().as_str(), m);
        }
        assert!(matches!("bogus".parse::<SplitMode>(), Err(DataError::UnknownSplitMode(_))));
    }

    #[test]
    fn kfold_needs_five() {
        assert!(split_dataset(&with_comments(&[1; 4]), SplitMode::Kfold5, 0).is_err());
    }

    proptest! {
        #[test]
        fn holdout_is_disjoint_and_complete(n in 1usize..60, seed in any::<u64>()) {
            let s = with_comments(&vec![1; n]);
            let f = &split_dataset(&s, SplitMode::Holdout80_20, seed).unwrap()[0];
            let mut both: Vec<usize> = f.train.iter().chain(&f.test).copied().collect();
            both.sort_unstable();
            prop_assert_eq!(both, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(&split_dataset(&s, SplitMode::Holdout80_20, seed).unwrap()[0], f);
        }

        #[test]
        fn kfold_tests_partition_the_corpus(n in 5usize..60, seed in any::<u64>()) {
            let s = with_comments(&vec![1; n]);
            let folds = split_dataset(&s, SplitMode::Kfold5, seed).unwrap();
            prop_assert_eq!(folds.len(), 5);
            let mut tests: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
            tests.sort_unstable();
            prop_assert_eq!(tests, (0..n).collect::<Vec<_>>());
            for f in &folds {
                prop_assert_eq!(f.train.len() + f.test.len(), n);
                prop_assert!(f.test.iter().all(|i| !f.train.contains(i)));
            }
        }
    }
}
