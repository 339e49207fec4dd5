//! Cross-modal fusion of image and text representations, trained jointly
//! with a linear classifier.
//!
//! | strategy          | fused row                                   | width      |
//! |-------------------|---------------------------------------------|------------|
//! | `simple_concat`   | `[x/‖x‖, y/‖y‖]`                            | `d_img+d_txt` |
//! | `linear_concat`   | `[W_img x, W_txt y]`                        | `2 d_alg`  |
//! | `linear_addition` | `W_img x + W_txt y`                         | `d_alg`    |
//! | `cross_attention` | `mean_i softmax(Q K^T / sqrt(d_k)) V`       | `d_k`      |
//!
//! Cross attention runs at token level: image tokens give the queries
//! `Q = X_img W_Q^T`, text tokens give `K = X_txt W_K^T` and
//! `V = X_txt W_V^T`. With pooled vectors each modality is a one-token
//! sequence and the softmax is identically 1.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, LossLog, Objective, TrainConfig};
use crate::probe::{self, head_loss_grad, LossKind, ProbeModel};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    SimpleConcat,
    LinearConcat,
    LinearAddition,
    CrossAttention,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::SimpleConcat,
        FusionStrategy::LinearConcat,
        FusionStrategy::LinearAddition,
        FusionStrategy::CrossAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::SimpleConcat => "simple_concat",
            FusionStrategy::LinearConcat => "linear_concat",
            FusionStrategy::LinearAddition => "linear_addition",
            FusionStrategy::CrossAttention => "cross_attention",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }

    pub fn needs_tokens(self) -> bool {
        self == FusionStrategy::CrossAttention
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion strategy {s:?}")))
    }
}

/// Shared-space sizes for the projected strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionDims {
    pub d_alg: usize,
    pub d_k: usize,
}

impl Default for FusionDims {
    fn default() -> Self {
        Self { d_alg: 512, d_k: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub strategy: FusionStrategy,
    pub d_img: usize,
    pub d_txt: usize,
    pub dims: FusionDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_img: Option<Array2<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_txt: Option<Array2<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_q: Option<Array2<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_k: Option<Array2<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_v: Option<Array2<f64>>,
}

/// Both modalities for the same samples, row-aligned. Token tensors are
/// only read by cross attention.
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs<'a> {
    pub img: ArrayView2<'a, f64>,
    pub txt: ArrayView2<'a, f64>,
    pub img_tokens: Option<ArrayView3<'a, f64>>,
    pub txt_tokens: Option<ArrayView3<'a, f64>>,
}

impl<'a> FusionInputs<'a> {
    pub fn pooled(img: ArrayView2<'a, f64>, txt: ArrayView2<'a, f64>) -> Self {
        Self {
            img,
            txt,
            img_tokens: None,
            txt_tokens: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.img.nrows()
    }

    fn check(&self) -> Result<()> {
        if self.img.nrows() != self.txt.nrows() {
            return Err(Error::shape(format!(
                "image has {} rows, text has {}: modalities are not aligned",
                self.img.nrows(),
                self.txt.nrows()
            )));
        }
        for (tokens, pooled, name) in [(self.img_tokens, self.img, "image"), (self.txt_tokens, self.txt, "text")] {
            if let Some(tok) = tokens {
                let (n, _, d) = tok.dim();
                if n != pooled.nrows() || d != pooled.ncols() {
                    return Err(Error::shape(format!(
                        "{name} tokens {:?} do not match pooled {:?}",
                        tok.dim(),
                        pooled.dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Token sequences for sample `i`; a pooled row stands in as a single token.
    fn img_seq(&self, i: usize) -> ArrayView2<'a, f64> {
        match self.img_tokens {
            Some(t) => t.index_axis_move(Axis(0), i),
            None => self.img.slice_move(s![i..i + 1, ..]),
        }
    }

    fn txt_seq(&self, i: usize) -> ArrayView2<'a, f64> {
        match self.txt_tokens {
            Some(t) => t.index_axis_move(Axis(0), i),
            None => self.txt.slice_move(s![i..i + 1, ..]),
        }
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Row-wise attention weights and pooled output of one sample.
pub fn cross_attention_sample(
    img_seq: ArrayView2<f64>,
    txt_seq: ArrayView2<f64>,
    w_q: ArrayView2<f64>,
    w_k: ArrayView2<f64>,
    w_v: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let d_k = w_q.nrows() as f64;
    let q = img_seq.dot(&w_q.t());
    let k = txt_seq.dot(&w_k.t());
    let v = txt_seq.dot(&w_v.t());
    let mut attn = q.dot(&k.t()) / d_k.sqrt();
    softmax_rows(&mut attn);
    let out = attn.dot(&v).mean_axis(Axis(0)).expect("at least one query");
    (attn, out)
}

fn l2_normalize_rows(x: ArrayView2<f64>, name: &str) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate(format!("{name} row {i} has zero norm")));
        }
        row /= norm;
    }
    Ok(out)
}

impl FusionModel {
    pub fn output_dim(&self) -> usize {
        output_dim(self.strategy, self.d_img, self.d_txt, self.dims)
    }

    fn check_inputs(&self, inputs: &FusionInputs) -> Result<()> {
        inputs.check()?;
        if inputs.img.ncols() != self.d_img || inputs.txt.ncols() != self.d_txt {
            return Err(Error::shape(format!(
                "inputs are ({}, {}) wide, model expects ({}, {})",
                inputs.img.ncols(),
                inputs.txt.ncols(),
                self.d_img,
                self.d_txt
            )));
        }
        Ok(())
    }

    /// Fused representation, one row per sample.
    pub fn fuse(&self, inputs: &FusionInputs) -> Result<Array2<f64>> {
        self.check_inputs(inputs)?;
        let n = inputs.rows();
        Ok(match self.strategy {
            FusionStrategy::SimpleConcat => {
                let img = l2_normalize_rows(inputs.img, "image")?;
                let txt = l2_normalize_rows(inputs.txt, "text")?;
                ndarray::concatenate(Axis(1), &[img.view(), txt.view()]).expect("same rows")
            }
            FusionStrategy::LinearConcat => {
                let a = inputs.img.dot(&self.w_img.as_ref().expect("w_img").t());
                let b = inputs.txt.dot(&self.w_txt.as_ref().expect("w_txt").t());
                ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same rows")
            }
            FusionStrategy::LinearAddition => {
                inputs.img.dot(&self.w_img.as_ref().expect("w_img").t())
                    + inputs.txt.dot(&self.w_txt.as_ref().expect("w_txt").t())
            }
            FusionStrategy::CrossAttention => {
                let (w_q, w_k, w_v) = (
                    self.w_q.as_ref().expect("w_q"),
                    self.w_k.as_ref().expect("w_k"),
                    self.w_v.as_ref().expect("w_v"),
                );
                let mut out = Array2::zeros((n, self.dims.d_k));
                for i in 0..n {
                    let (_, row) = cross_attention_sample(
                        inputs.img_seq(i),
                        inputs.txt_seq(i),
                        w_q.view(),
                        w_k.view(),
                        w_v.view(),
                    );
                    out.row_mut(i).assign(&row);
                }
                out
            }
        })
    }

    fn from_params(strategy: FusionStrategy, d_img: usize, d_txt: usize, dims: FusionDims, params: &[f64]) -> Self {
        let layout = Layout::new(strategy, d_img, d_txt, dims);
        let take = |slot: Option<(usize, usize, usize)>| {
            slot.map(|(off, r, c)| Array2::from_shape_vec((r, c), params[off..off + r * c].to_vec()).expect("layout"))
        };
        Self {
            strategy,
            d_img,
            d_txt,
            dims,
            w_img: take(layout.w_img),
            w_txt: take(layout.w_txt),
            w_q: take(layout.w_q),
            w_k: take(layout.w_k),
            w_v: take(layout.w_v),
        }
    }
}

pub fn output_dim(strategy: FusionStrategy, d_img: usize, d_txt: usize, dims: FusionDims) -> usize {
    match strategy {
        FusionStrategy::SimpleConcat => d_img + d_txt,
        FusionStrategy::LinearConcat => 2 * dims.d_alg,
        FusionStrategy::LinearAddition => dims.d_alg,
        FusionStrategy::CrossAttention => dims.d_k,
    }
}

/// Offsets `(start, rows, cols)` of each fusion matrix inside the flat
/// parameter vector; the classifier follows at `fusion_len`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w_img: Option<(usize, usize, usize)>,
    w_txt: Option<(usize, usize, usize)>,
    w_q: Option<(usize, usize, usize)>,
    w_k: Option<(usize, usize, usize)>,
    w_v: Option<(usize, usize, usize)>,
    fusion_len: usize,
}

impl Layout {
    fn new(strategy: FusionStrategy, d_img: usize, d_txt: usize, dims: FusionDims) -> Self {
        let mut off = 0;
        let mut slot = |r: usize, c: usize| {
            let s = (off, r, c);
            off += r * c;
            Some(s)
        };
        let mut l = Layout {
            w_img: None,
            w_txt: None,
            w_q: None,
            w_k: None,
            w_v: None,
            fusion_len: 0,
        };
        match strategy {
            FusionStrategy::SimpleConcat => {}
            FusionStrategy::LinearConcat | FusionStrategy::LinearAddition => {
                l.w_img = slot(dims.d_alg, d_img);
                l.w_txt = slot(dims.d_alg, d_txt);
            }
            FusionStrategy::CrossAttention => {
                l.w_q = slot(dims.d_k, d_img);
                l.w_k = slot(dims.d_k, d_txt);
                l.w_v = slot(dims.d_k, d_txt);
            }
        }
        l.fusion_len = off;
        l
    }

    fn view<'p>(&self, slot: Option<(usize, usize, usize)>, params: &'p [f64]) -> ArrayView2<'p, f64> {
        let (off, r, c) = slot.expect("slot present for strategy");
        ArrayView2::from_shape((r, c), &params[off..off + r * c]).expect("layout")
    }
}

/// Joint objective over fusion parameters and the classifier head.
pub struct FusionObjective<'a> {
    pub strategy: FusionStrategy,
    pub dims: FusionDims,
    pub inputs: FusionInputs<'a>,
    pub targets: ArrayView2<'a, u8>,
    pub kind: LossKind,
}

impl FusionObjective<'_> {
    fn layout(&self) -> Layout {
        Layout::new(self.strategy, self.inputs.img.ncols(), self.inputs.txt.ncols(), self.dims)
    }

    fn fused_dim(&self) -> usize {
        output_dim(self.strategy, self.inputs.img.ncols(), self.inputs.txt.ncols(), self.dims)
    }

    fn classes(&self) -> usize {
        self.targets.ncols()
    }

    /// Deterministic initial parameters: fusion matrices uniform in
    /// `±1/sqrt(fan_in)`, classifier identical to a plain probe.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let layout = self.layout();
        let mut params = Vec::with_capacity(self.num_params());
        for (idx, slot) in [layout.w_img, layout.w_txt, layout.w_q, layout.w_k, layout.w_v].into_iter().enumerate() {
            if let Some((_, r, c)) = slot {
                let mut stream = rng::keyed(rng::domain::FUSION_INIT, seed, &[self.strategy.code(), idx as u64]);
                params.extend(probe::uniform_init(&mut stream, r * c, c));
            }
        }
        params.extend(ProbeModel::init_params(self.classes(), self.fused_dim(), seed));
        params
    }
}

impl Objective for FusionObjective<'_> {
    fn samples(&self) -> usize {
        self.inputs.rows()
    }

    fn num_params(&self) -> usize {
        self.layout().fusion_len + self.classes() * (self.fused_dim() + 1)
    }

    fn loss_grad(&self, params: &[f64], rows: &[usize], grad: &mut [f64]) -> f64 {
        let layout = self.layout();
        let (k, df) = (self.classes(), self.fused_dim());
        let head_off = layout.fusion_len;
        let w_cls = ArrayView2::from_shape((k, df), &params[head_off..head_off + k * df]).expect("layout");
        let b_cls = ndarray::ArrayView1::from(&params[head_off + k * df..]);
        let img = self.inputs.img.select(Axis(0), rows);
        let txt = self.inputs.txt.select(Axis(0), rows);
        let y = self.targets.select(Axis(0), rows);

        // Forward to the fused batch; cross attention keeps per-sample state.
        let mut attn_cache = Vec::new();
        let fused = match self.strategy {
            FusionStrategy::SimpleConcat => {
                let a = l2_normalize_rows(img.view(), "image").expect("checked before training");
                let b = l2_normalize_rows(txt.view(), "text").expect("checked before training");
                ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same rows")
            }
            FusionStrategy::LinearConcat => {
                let a = img.dot(&layout.view(layout.w_img, params).t());
                let b = txt.dot(&layout.view(layout.w_txt, params).t());
                ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same rows")
            }
            FusionStrategy::LinearAddition => {
                img.dot(&layout.view(layout.w_img, params).t()) + txt.dot(&layout.view(layout.w_txt, params).t())
            }
            FusionStrategy::CrossAttention => {
                let (w_q, w_k, w_v) = (
                    layout.view(layout.w_q, params),
                    layout.view(layout.w_k, params),
                    layout.view(layout.w_v, params),
                );
                let mut out = Array2::zeros((rows.len(), df));
                for (r, &i) in rows.iter().enumerate() {
                    let xi = self.inputs.img_seq(i);
                    let xt = self.inputs.txt_seq(i);
                    let q = xi.dot(&w_q.t());
                    let kk = xt.dot(&w_k.t());
                    let v = xt.dot(&w_v.t());
                    let mut attn = q.dot(&kk.t()) / (df as f64).sqrt();
                    softmax_rows(&mut attn);
                    out.row_mut(r).assign(&attn.dot(&v).mean_axis(Axis(0)).expect("queries"));
                    attn_cache.push((q, kk, v, attn));
                }
                out
            }
        };

        let logits = fused.dot(&w_cls.t()) + b_cls;
        let (loss, g_logits) = head_loss_grad(logits.view(), y.view(), self.kind);

        let g_wcls = g_logits.t().dot(&fused);
        let g_bcls = g_logits.sum_axis(Axis(0));
        grad[head_off..head_off + k * df].iter_mut().zip(g_wcls.iter()).for_each(|(d, s)| *d = *s);
        grad[head_off + k * df..].iter_mut().zip(g_bcls.iter()).for_each(|(d, s)| *d = *s);

        let g_fused = g_logits.dot(&w_cls);
        let mut write = |slot: Option<(usize, usize, usize)>, g: &Array2<f64>| {
            let (off, r, c) = slot.expect("slot");
            for (dst, src) in grad[off..off + r * c].iter_mut().zip(g.iter()) {
                *dst += src;
            }
        };
        match self.strategy {
            FusionStrategy::SimpleConcat => {}
            FusionStrategy::LinearConcat => {
                let d_alg = self.dims.d_alg;
                let ga = g_fused.slice(s![.., ..d_alg]);
                let gb = g_fused.slice(s![.., d_alg..]);
                write(layout.w_img, &ga.t().dot(&img));
                write(layout.w_txt, &gb.t().dot(&txt));
            }
            FusionStrategy::LinearAddition => {
                write(layout.w_img, &g_fused.t().dot(&img));
                write(layout.w_txt, &g_fused.t().dot(&txt));
            }
            FusionStrategy::CrossAttention => {
                let scale = 1.0 / (df as f64).sqrt();
                let (w_q_shape, w_k_shape) = (layout.w_q.unwrap(), layout.w_k.unwrap());
                let mut g_wq = Array2::zeros((w_q_shape.1, w_q_shape.2));
                let mut g_wk = Array2::zeros((w_k_shape.1, w_k_shape.2));
                let mut g_wv = Array2::zeros((w_k_shape.1, w_k_shape.2));
                for ((r, &i), (q, kk, v, attn)) in rows.iter().enumerate().zip(&attn_cache) {
                    let xi = self.inputs.img_seq(i);
                    let xt = self.inputs.txt_seq(i);
                    let n_q = attn.nrows() as f64;
                    // d(out)/d(O) spreads the pooled gradient evenly over queries.
                    let g_row = g_fused.row(r).to_owned() / n_q;
                    let g_o = Array2::from_shape_fn((attn.nrows(), df), |(_, c)| g_row[c]);
                    let g_attn = g_o.dot(&v.t());
                    let g_v = attn.t().dot(&g_o);
                    let row_dot = (&g_attn * attn).sum_axis(Axis(1));
                    let mut g_scores = attn * &(g_attn - &row_dot.insert_axis(Axis(1)));
                    g_scores *= scale;
                    let g_q = g_scores.dot(kk);
                    let g_k = g_scores.t().dot(q);
                    g_wq += &g_q.t().dot(&xi);
                    g_wk += &g_k.t().dot(&xt);
                    g_wv += &g_v.t().dot(&xt);
                }
                write(layout.w_q, &g_wq);
                write(layout.w_k, &g_wk);
                write(layout.w_v, &g_wv);
            }
        }
        loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedClassifier {
    pub fusion: FusionModel,
    pub head: ProbeModel,
}

impl FusedClassifier {
    pub fn predict(&self, inputs: &FusionInputs) -> Result<Array2<f64>> {
        let fused = self.fusion.fuse(inputs)?;
        self.head.predict_array(fused.view())
    }
}

/// Trains fusion parameters and the classifier end to end. `simple_concat`
/// has no fusion parameters and reduces to a probe on the normalized
/// concatenation.
pub fn train_fused<'a>(
    inputs: &FusionInputs<'a>,
    labels: ArrayView2<'a, u8>,
    strategy: FusionStrategy,
    dims: FusionDims,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<(FusionModel, ProbeModel, LossLog)> {
    inputs.check()?;
    probe::check_rows(inputs.rows(), labels.nrows())?;
    probe::validate_labels(labels, kind)?;
    let (d_img, d_txt) = (inputs.img.ncols(), inputs.txt.ncols());
    if strategy != FusionStrategy::SimpleConcat && (dims.d_alg == 0 || dims.d_k == 0) {
        return Err(Error::invalid("fusion dimensions must be >= 1"));
    }

    if strategy == FusionStrategy::SimpleConcat {
        let model = FusionModel::from_params(strategy, d_img, d_txt, dims, &[]);
        let fused = model.fuse(inputs)?;
        let (head, log) = probe::train_probe_array(fused.view(), labels, kind, cfg)?;
        return Ok((model, head, log));
    }

    let objective = FusionObjective {
        strategy,
        dims,
        inputs: *inputs,
        targets: labels,
        kind,
    };
    let init = objective.init_params(cfg.seed);
    let (params, log) = optim::train(&objective, init, cfg)?;
    let layout = objective.layout();
    let model = FusionModel::from_params(strategy, d_img, d_txt, dims, &params[..layout.fusion_len]);
    let (k, df) = (labels.ncols(), objective.fused_dim());
    let head_params = &params[layout.fusion_len..];
    let head = ProbeModel {
        weights: Array2::from_shape_vec((k, df), head_params[..k * df].to_vec()).expect("layout"),
        bias: Array1::from(head_params[k * df..].to_vec()),
        loss_kind: kind,
    };
    Ok((model, head, log))
}

/// Owned token tensor in `f64`, for callers holding `f32` token features.
pub fn tokens_f64(t: &Array3<f32>) -> Array3<f64> {
    t.mapv(f64::from)
}
