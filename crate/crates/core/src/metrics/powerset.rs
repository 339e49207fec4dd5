//! Label-powerset accounting: each distinct ground-truth label set is one
//! bucket, scored by exact-set-match accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowersetBucket {
    /// Sorted, deduplicated class indices.
    pub labels: Vec<usize>,
    pub count: usize,
    pub exact_matches: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowersetReport {
    pub total: usize,
    pub distinct: usize,
    pub top_m: usize,
    /// The `top_m` most frequent buckets, count descending then key ascending.
    pub buckets: Vec<PowersetBucket>,
}

pub const DEFAULT_TOP_M: usize = 80;

fn canonical(set: &[usize]) -> Vec<usize> {
    let mut v = set.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

pub fn powerset_report(pred_sets: &[Vec<usize>], truth_sets: &[Vec<usize>], top_m: usize) -> Result<PowersetReport> {
    if pred_sets.len() != truth_sets.len() {
        return Err(Error::shape(format!(
            "{} predicted sets vs {} truth sets",
            pred_sets.len(),
            truth_sets.len()
        )));
    }
    let mut tally: BTreeMap<Vec<usize>, (usize, usize)> = BTreeMap::new();
    for (pred, truth) in pred_sets.iter().zip(truth_sets) {
        let key = canonical(truth);
        let exact = canonical(pred) == key;
        let entry = tally.entry(key).or_default();
        entry.0 += 1;
        entry.1 += exact as usize;
    }
    let distinct = tally.len();
    let mut buckets: Vec<PowersetBucket> = tally
        .into_iter()
        .map(|(labels, (count, exact_matches))| PowersetBucket {
            labels,
            count,
            exact_matches,
            accuracy: exact_matches as f64 / count as f64,
        })
        .collect();
    // BTreeMap order is already key-ascending; a stable sort on count keeps it.
    buckets.sort_by_key(|b| std::cmp::Reverse(b.count));
    buckets.truncate(top_m);
    Ok(PowersetReport {
        total: truth_sets.len(),
        distinct,
        top_m,
        buckets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bucket_all_exact() {
        let truth = vec![vec![1, 3]; 5];
        let pred = vec![vec![3, 1]; 5];
        let r = powerset_report(&pred, &truth, DEFAULT_TOP_M).unwrap();
        assert_eq!(r.distinct, 1);
        assert_eq!(r.buckets[0].count, 5);
        assert_eq!(r.buckets[0].accuracy, 1.0);
    }

    #[test]
    fn dropped_label_is_a_miss() {
        let r = powerset_report(&[vec![0]], &[vec![0, 2]], 10).unwrap();
        assert_eq!(r.buckets[0].accuracy, 0.0);
    }

    #[test]
    fn ordering_and_truncation() {
        let truth = vec![vec![2], vec![1], vec![2], vec![0, 1], vec![1], vec![3]];
        let pred = truth.clone();
        let r = powerset_report(&pred, &truth, 3).unwrap();
        assert_eq!(r.total, 6);
        assert_eq!(r.distinct, 4);
        let keys: Vec<_> = r.buckets.iter().map(|b| b.labels.clone()).collect();
        assert_eq!(keys, vec![vec![1], vec![2], vec![0, 1]]);
    }
}
