//! Linear probing on frozen features: one linear layer trained with
//! sigmoid-BCE (multi-label) or softmax-CE (single-label).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::optim::{self, LossLog, Objective, TrainConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    BceMultilabel,
    CeSinglelabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `K x d`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub loss_kind: LossKind,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = row.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Mean loss of `logits` against `targets` and its gradient w.r.t. the
/// logits. BCE averages over all `N*K` entries, CE over the `N` rows.
pub(crate) fn head_loss_grad(logits: ArrayView2<f64>, targets: ArrayView2<u8>, kind: LossKind) -> (f64, Array2<f64>) {
    let (n, k) = logits.dim();
    let mut grad = Array2::zeros((n, k));
    let mut loss = 0.0;
    match kind {
        LossKind::BceMultilabel => {
            let denom = (n * k) as f64;
            for ((z, &y), g) in logits.iter().zip(targets.iter()).zip(grad.iter_mut()) {
                let y = y as f64;
                loss += softplus(*z) - y * z;
                *g = (sigmoid(*z) - y) / denom;
            }
            (loss / denom, grad)
        }
        LossKind::CeSinglelabel => {
            for ((z, y), mut g) in logits.rows().into_iter().zip(targets.rows()).zip(grad.rows_mut()) {
                let p = softmax_row(z);
                let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max + z.mapv(|v| (v - max).exp()).sum().ln();
                for j in 0..k {
                    let yj = y[j] as f64;
                    loss -= yj * (z[j] - lse);
                    g[j] = (p[j] - yj) / n as f64;
                }
            }
            (loss / n as f64, grad)
        }
    }
}

pub(crate) fn validate_labels(labels: ArrayView2<u8>, kind: LossKind) -> Result<()> {
    match kind {
        LossKind::BceMultilabel => {
            if labels.iter().any(|&v| v > 1) {
                return Err(Error::invalid("BCE labels must be binary"));
            }
        }
        LossKind::CeSinglelabel => {
            for (i, row) in labels.rows().into_iter().enumerate() {
                if row.iter().any(|&v| v > 1) || row.iter().map(|&v| v as usize).sum::<usize>() != 1 {
                    return Err(Error::invalid(format!("CE label row {i} is not one-hot")));
                }
            }
        }
    }
    Ok(())
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` entries from a keyed stream.
pub(crate) fn uniform_init(stream: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| stream.random_range(-bound..bound)).collect()
}

/// Cross-entropy or BCE objective of a linear layer on fixed inputs.
/// Parameters are `W` (row-major `K x d`) followed by the bias.
pub struct LinearObjective<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, u8>,
    pub kind: LossKind,
}

impl LinearObjective<'_> {
    fn classes(&self) -> usize {
        self.targets.ncols()
    }

    fn dim(&self) -> usize {
        self.inputs.ncols()
    }
}

impl Objective for LinearObjective<'_> {
    fn samples(&self) -> usize {
        self.inputs.nrows()
    }

    fn num_params(&self) -> usize {
        self.classes() * (self.dim() + 1)
    }

    fn loss_grad(&self, params: &[f64], rows: &[usize], grad: &mut [f64]) -> f64 {
        let (k, d) = (self.classes(), self.dim());
        let w = ArrayView2::from_shape((k, d), &params[..k * d]).expect("param layout");
        let b = ArrayView1::from(&params[k * d..]);
        let x = self.inputs.select(Axis(0), rows);
        let y = self.targets.select(Axis(0), rows);
        let logits = x.dot(&w.t()) + b;
        let (loss, g_logits) = head_loss_grad(logits.view(), y.view(), self.kind);
        let gw = g_logits.t().dot(&x);
        let gb = g_logits.sum_axis(Axis(0));
        grad[..k * d].iter_mut().zip(gw.iter()).for_each(|(d, s)| *d = *s);
        grad[k * d..].iter_mut().zip(gb.iter()).for_each(|(d, s)| *d = *s);
        loss
    }
}

pub(crate) fn check_rows(features: usize, labels: usize) -> Result<()> {
    if features != labels {
        return Err(Error::shape(format!("{features} feature rows vs {labels} label rows")));
    }
    if features == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(())
}

impl ProbeModel {
    fn from_params(params: &[f64], k: usize, d: usize, loss_kind: LossKind) -> Self {
        Self {
            weights: Array2::from_shape_vec((k, d), params[..k * d].to_vec()).expect("param layout"),
            bias: Array1::from(params[k * d..].to_vec()),
            loss_kind,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub(crate) fn init_params(k: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut stream = rng::keyed(rng::domain::PROBE_INIT, seed, &[k as u64, d as u64]);
        let mut params = uniform_init(&mut stream, k * d, d);
        params.extend(std::iter::repeat_n(0.0, k));
        params
    }

    /// Sigmoid scores for BCE models, row-wise softmax for CE models.
    pub fn predict_array(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "features have dimension {}, model expects {}",
                inputs.ncols(),
                self.dim()
            )));
        }
        let mut logits = inputs.dot(&self.weights.t()) + &self.bias;
        match self.loss_kind {
            LossKind::BceMultilabel => logits.mapv_inplace(sigmoid),
            LossKind::CeSinglelabel => {
                for mut row in logits.rows_mut() {
                    let p = softmax_row(row.view());
                    row.assign(&p);
                }
            }
        }
        Ok(logits)
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<Array2<f64>> {
        self.predict_array(features.to_f64().view())
    }
}

/// Trains a probe on raw `f64` inputs.
pub fn train_probe_array(
    inputs: ArrayView2<f64>,
    labels: ArrayView2<u8>,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<(ProbeModel, LossLog)> {
    check_rows(inputs.nrows(), labels.nrows())?;
    if labels.ncols() == 0 {
        return Err(Error::invalid("label matrix has no classes"));
    }
    validate_labels(labels, kind)?;
    let (k, d) = (labels.ncols(), inputs.ncols());
    let objective = LinearObjective {
        inputs,
        targets: labels,
        kind,
    };
    let init = ProbeModel::init_params(k, d, cfg.seed);
    let (params, log) = optim::train(&objective, init, cfg)?;
    Ok((ProbeModel::from_params(&params, k, d, kind), log))
}

pub fn train_probe(
    features: &FeatureMatrix,
    labels: ArrayView2<u8>,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<(ProbeModel, LossLog)> {
    train_probe_array(features.to_f64().view(), labels, kind, cfg)
}

/// Model state before any update, for the `lr0 = 0` hook and tests.
pub fn initial_probe(k: usize, d: usize, kind: LossKind, seed: u64) -> ProbeModel {
    ProbeModel::from_params(&ProbeModel::init_params(k, d, seed), k, d, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Modality;
    use ndarray::array;

    fn one_hot(n: usize, k: usize) -> Array2<u8> {
        Array2::from_shape_fn((n, k), |(i, j)| (i % k == j) as u8)
    }

    #[test]
    fn zero_weights_score_half() {
        let m = ProbeModel {
            weights: Array2::zeros((3, 2)),
            bias: Array1::zeros(3),
            loss_kind: LossKind::BceMultilabel,
        };
        let s = m.predict_array(array![[1.0, -4.0]].view()).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = ProbeModel {
            weights: array![[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]],
            bias: array![0.1, 0.2, -0.3],
            loss_kind: LossKind::CeSinglelabel,
        };
        let s = m.predict_array(array![[0.7, -1.1]].view()).unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_sigmoid_case() {
        let m = ProbeModel {
            weights: array![[1.0, 0.0], [0.0, 1.0]],
            bias: array![0.0, 0.0],
            loss_kind: LossKind::BceMultilabel,
        };
        let s = m.predict_array(array![[2.0, -2.0]].view()).unwrap();
        assert!((s[[0, 0]] - 0.880_797).abs() < 1e-6);
        assert!((s[[0, 1]] - 0.119_203).abs() < 1e-6);
    }

    #[test]
    fn separable_one_hot_training() {
        let k = 4;
        let x = one_hot(64, k).mapv(f64::from);
        let y = one_hot(64, k);
        let fm = FeatureMatrix::new(x.mapv(|v| v as f32), Modality::Image, 0, 1).unwrap();
        let cfg = TrainConfig { lr0: 0.05, epochs: 20, batch_size: 16, seed: 3, ..Default::default() };
        let (model, log) = train_probe(&fm, y.view(), LossKind::BceMultilabel, &cfg).unwrap();
        assert_eq!(log.losses.len(), 20);
        assert!(log.losses[..5].windows(2).all(|w| w[1] < w[0]));
        let scores = model.predict(&fm).unwrap();
        let correct = scores
            .rows()
            .into_iter()
            .zip(y.rows())
            .filter(|(s, t)| s.iter().zip(t.iter()).all(|(&p, &l)| (p >= 0.5) == (l == 1)))
            .count();
        assert_eq!(correct, 64);
    }

    #[test]
    fn zero_lr_returns_initialization() {
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i + j) as f64 * 0.1);
        let y = one_hot(10, 2);
        let cfg = TrainConfig { lr0: 0.0, epochs: 1, seed: 9, ..Default::default() };
        let (model, _) = train_probe_array(x.view(), y.view(), LossKind::BceMultilabel, &cfg).unwrap();
        assert_eq!(model, initial_probe(2, 3, LossKind::BceMultilabel, 9));
        assert!(model.bias.iter().all(|&b| b == 0.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(model.weights.iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn deterministic_weights() {
        let x = Array2::from_shape_fn((40, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let y = Array2::from_shape_fn((40, 3), |(i, j)| ((i + j) % 2) as u8);
        let cfg = TrainConfig { epochs: 3, batch_size: 7, seed: 1, ..Default::default() };
        let (a, _) = train_probe_array(x.view(), y.view(), LossKind::BceMultilabel, &cfg).unwrap();
        let (b, _) = train_probe_array(x.view(), y.view(), LossKind::BceMultilabel, &cfg).unwrap();
        let bits = |m: &ProbeModel| m.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Array2::<f64>::zeros((4, 2));
        let cfg = TrainConfig::default();
        let y_bad = Array2::from_elem((4, 2), 2u8);
        assert!(train_probe_array(x.view(), y_bad.view(), LossKind::BceMultilabel, &cfg).is_err());
        let y_short = one_hot(3, 2);
        assert!(train_probe_array(x.view(), y_short.view(), LossKind::BceMultilabel, &cfg).is_err());
        let y_multi = Array2::from_elem((4, 2), 1u8);
        assert!(train_probe_array(x.view(), y_multi.view(), LossKind::CeSinglelabel, &cfg).is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        let y_empty = Array2::<u8>::zeros((0, 2));
        assert!(train_probe_array(empty.view(), y_empty.view(), LossKind::BceMultilabel, &cfg).is_err());
        let m = initial_probe(2, 3, LossKind::BceMultilabel, 0);
        assert!(m.predict_array(x.view()).is_err());
    }
}
