//! AUC (average-rank Mann-Whitney form) and logloss.

use thiserror::Error;

use crate::tensor::logistic_loss;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUC is undefined: need at least one positive and one negative label ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("empty scored set")]
    Empty,
}

/// Parallel scores and binary labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::Length {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricError::Empty);
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. `O(n log n)` via average ranks.
pub fn auc(set: &ScoredSet) -> Result<f64, MetricError> {
    let n = set.len();
    let positives = set.labels.iter().filter(|&&l| l == 1).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Sum of 1-based ranks of positives, with tied blocks sharing their mean
    // rank. Ranks are kept doubled so everything stays integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // mean of ranks i+1..=j+1, doubled
        let doubled_mean = (i + 1 + j + 1) as u128;
        let pos_in_block = order[i..=j].iter().filter(|&&k| set.labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled_mean * pos_in_block;
        i = j + 1;
    }
    let p = positives as u128;
    // U = R - P(P+1)/2, doubled: 2U = 2R - P(P+1)
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Mean clamped logistic loss, accumulated in `f64`.
pub fn logloss(set: &ScoredSet) -> Result<f64, MetricError> {
    if set.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = set
        .scores
        .iter()
        .zip(&set.labels)
        .map(|(&p, &y)| logistic_loss(p, f64::from(y)))
        .sum();
    Ok(total / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(set: &ScoredSet) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in set.labels.iter().enumerate() {
            for (j, &lj) in set.labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if set.scores[i] > set.scores[j] {
                        credit += 1.0;
                    } else if set.scores[i] == set.scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_examples() {
        let s = ScoredSet::new(vec![0.9, 0.1], vec![1, 0]).unwrap();
        assert_eq!(auc(&s).unwrap(), 1.0);
        let s = ScoredSet::new(vec![0.3; 6], vec![1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(auc(&s).unwrap(), 0.5);
        let s = ScoredSet::new(vec![0.1, 0.4, 0.35, 0.8], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(pairwise_auc(&s), 0.75);
        assert_eq!(auc(&s).unwrap(), 0.75);
    }

    #[test]
    fn auc_single_class_is_error() {
        let s = ScoredSet::new(vec![0.1, 0.2], vec![1, 1]).unwrap();
        assert_eq!(
            auc(&s),
            Err(MetricError::SingleClass {
                positives: 2,
                negatives: 0
            })
        );
    }

    #[test]
    fn scored_set_validation() {
        assert!(matches!(ScoredSet::new(vec![0.1], vec![]), Err(MetricError::Length { .. })));
        assert_eq!(ScoredSet::new(vec![], vec![]), Err(MetricError::Empty));
    }

    #[test]
    fn logloss_examples() {
        let s = ScoredSet::new(vec![0.5; 10], vec![1, 0, 1, 1, 0, 0, 0, 1, 0, 1]).unwrap();
        assert!((logloss(&s).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let s = ScoredSet::new(vec![1.0, 0.0, 1.0], vec![1, 0, 1]).unwrap();
        let floor = -(1.0f64 - 1e-7).ln();
        assert!((logloss(&s).unwrap() - floor).abs() < 1e-15);
        assert!((floor - 1e-7).abs() < 1e-13);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(
            raw in proptest::collection::vec((0u8..8, 0u8..2), 2..60),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 8.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let set = ScoredSet::new(scores, labels).unwrap();
            prop_assert!((auc(&set).unwrap() - pairwise_auc(&set)).abs() < 1e-12);
        }

        #[test]
        fn auc_monotone_transform_and_label_flip(
            raw in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..60),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
            let a = auc(&set).unwrap();
            let squashed = ScoredSet::new(scores.iter().map(|s| s.exp()).collect(), labels.clone()).unwrap();
            prop_assert!((auc(&squashed).unwrap() - a).abs() < 1e-12);
            let flipped = ScoredSet::new(scores, labels.iter().map(|l| 1 - l).collect()).unwrap();
            prop_assert!((auc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }
}
