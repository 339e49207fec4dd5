//! Single-label top-k accuracy and error rate.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Position of `class` in the descending ranking of `row`, ties broken by
/// smaller class index first.
pub(crate) fn rank_of(row: &[f64], class: usize) -> usize {
    let target = row[class];
    row.iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < class))
        .count()
}

fn check(scores: ArrayView2<f64>, truth_class: &[usize]) -> Result<()> {
    if scores.nrows() != truth_class.len() {
        return Err(Error::shape(format!(
            "{} score rows vs {} labels",
            scores.nrows(),
            truth_class.len()
        )));
    }
    if scores.nrows() == 0 {
        return Err(Error::invalid("no samples"));
    }
    if let Some(&bad) = truth_class.iter().find(|&&c| c >= scores.ncols()) {
        return Err(Error::OutOfRange {
            what: "class",
            value: bad.to_string(),
            allowed: format!("[0, {})", scores.ncols()),
        });
    }
    Ok(())
}

/// Fraction of rows whose true class ranks among the `k` highest scores.
pub fn topk_accuracy(scores: ArrayView2<f64>, truth_class: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > scores.ncols() {
        return Err(Error::OutOfRange {
            what: "k",
            value: k.to_string(),
            allowed: format!("[1, {}]", scores.ncols()),
        });
    }
    check(scores, truth_class)?;
    let hits = scores
        .rows()
        .into_iter()
        .zip(truth_class)
        .filter(|(row, &c)| rank_of(&row.to_vec(), c) < k)
        .count();
    Ok(hits as f64 / truth_class.len() as f64)
}

/// `1 - top1`.
pub fn error_rate(scores: ArrayView2<f64>, truth_class: &[usize]) -> Result<f64> {
    Ok(1.0 - topk_accuracy(scores, truth_class, 1)?)
}
