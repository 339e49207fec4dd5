use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the emitted metric table.
pub const TABLE_HEADER: &str = "mAP,CP,CR,CF1,OP,OR,OF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "CP")]
    pub cp: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "CF1")]
    pub cf1: f64,
    #[serde(rename = "OP")]
    pub op: f64,
    #[serde(rename = "OR")]
    pub or: f64,
    #[serde(rename = "OF1")]
    pub of1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    /// Average precision per class; 0 for classes listed in `classes_without_positives`.
    pub per_class_ap: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// Excluded from the mAP average.
    pub classes_without_positives: Vec<usize>,
    /// Classes with no predicted positives; their precision counts as 0.
    pub classes_without_predictions: Vec<usize>,
    pub threshold: f64,
}

impl EvalResult {
    /// The seven headline metrics as percentages with two decimals, in
    /// [`TABLE_HEADER`] order.
    pub fn table_row(&self) -> String {
        [self.map, self.cp, self.cr, self.cf1, self.op, self.or, self.of1]
            .iter()
            .map(|v| format!("{:.2}", 100.0 * v))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// `(name, value)` for every populated scalar metric, fractions.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("mAP", self.map),
            ("CP", self.cp),
            ("CR", self.cr),
            ("CF1", self.cf1),
            ("OP", self.op),
            ("OR", self.or),
            ("OF1", self.of1),
        ];
        for (name, v) in [("top1", self.top1), ("top5", self.top5), ("error_rate", self.error_rate)] {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }
}

pub(crate) fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub(crate) fn check_binary(truth: ArrayView2<u8>) -> Result<()> {
    if truth.iter().any(|&v| v > 1) {
        return Err(Error::invalid("truth matrix must be binary"));
    }
    Ok(())
}

/// Non-interpolated average precision of one ranking. Ties in `scores`
/// keep their original index order.
pub fn average_precision(scores: &[f64], truth: &[u8]) -> Option<f64> {
    let positives = truth.iter().filter(|&&v| v == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Multi-label metric bundle. Decisions are `score >= threshold`.
pub fn evaluate(scores: ArrayView2<f64>, truth: ArrayView2<u8>, threshold: f64) -> Result<EvalResult> {
    if scores.dim() != truth.dim() {
        return Err(Error::shape(format!(
            "scores {:?} vs truth {:?}",
            scores.dim(),
            truth.dim()
        )));
    }
    if scores.nrows() == 0 {
        return Err(Error::invalid("cannot evaluate zero samples"));
    }
    check_binary(truth)?;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }

    let k = scores.ncols();
    let mut per_class_ap = vec![0.0; k];
    let mut per_class_f1 = vec![0.0; k];
    let mut without_pos = Vec::new();
    let mut without_pred = Vec::new();
    let (mut precision_sum, mut recall_sum) = (0.0, 0.0);
    let (mut tp_all, mut pred_all, mut pos_all) = (0usize, 0usize, 0usize);

    for c in 0..k {
        let col_scores: Vec<f64> = scores.column(c).to_vec();
        let col_truth: Vec<u8> = truth.column(c).to_vec();
        match average_precision(&col_scores, &col_truth) {
            Some(ap) => per_class_ap[c] = ap,
            None => without_pos.push(c),
        }

        let (mut tp, mut predicted, mut positive) = (0usize, 0usize, 0usize);
        for (&s, &y) in col_scores.iter().zip(&col_truth) {
            let hit = s >= threshold;
            predicted += hit as usize;
            positive += y as usize;
            tp += (hit && y == 1) as usize;
        }
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            without_pred.push(c);
            0.0
        };
        let recall = if positive > 0 { tp as f64 / positive as f64 } else { 0.0 };
        precision_sum += precision;
        recall_sum += recall;
        per_class_f1[c] = harmonic(precision, recall);
        tp_all += tp;
        pred_all += predicted;
        pos_all += positive;
    }

    if without_pos.len() == k {
        return Err(Error::Degenerate("no class has a positive example; mAP is undefined".into()));
    }
    let scored = k - without_pos.len();
    let map = per_class_ap.iter().sum::<f64>() / scored as f64;
    let cp = precision_sum / k as f64;
    let cr = recall_sum / k as f64;
    let op = if pred_all > 0 { tp_all as f64 / pred_all as f64 } else { 0.0 };
    let or = tp_all as f64 / pos_all as f64;

    Ok(EvalResult {
        map,
        cp,
        cr,
        cf1: harmonic(cp, cr),
        op,
        or,
        of1: harmonic(op, or),
        top1: None,
        top5: None,
        error_rate: None,
        per_class_ap,
        per_class_f1,
        classes_without_positives: without_pos,
        classes_without_predictions: without_pred,
        threshold,
    })
}
