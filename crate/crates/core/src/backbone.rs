//! Frozen, seeded diffusion-transformer stand-in with per-block taps.
//!
//! The model is a plain pre-norm transformer: input embedding (patch
//! projection for images, token lookup for text), an additive sinusoidal
//! timestep embedding on every token, then `depth` blocks of
//! `x + attn(ln(x))` followed by `x + ffn(ln(x))`. The tap for block `b` is
//! that block's output after its second residual add. Noise is applied to
//! the raw patches for images and to the token embeddings for text.
//!
//! Weights are `f32` and never mutated after [`Backbone::new`]. A
//! double-precision path ([`Backbone::forward_taps_f64`]) shares the same
//! generic forward code and exists for reference checks.

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::{FeatureMatrix, Modality, TokenFeatures};
use crate::rng;
use crate::schedule::{NoiseMode, NoiseSchedule};

pub trait Real:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub modality: Modality,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_input_dim: Option<usize>,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub init_seed: u64,
}

fn default_ffn_mult() -> usize {
    4
}

impl BackboneConfig {
    pub fn image(depth: usize, width: usize, heads: usize, seq_len: usize, patch_input_dim: usize, init_seed: u64) -> Self {
        Self {
            modality: Modality::Image,
            depth,
            width,
            heads,
            seq_len,
            vocab_size: None,
            patch_input_dim: Some(patch_input_dim),
            ffn_mult: default_ffn_mult(),
            init_seed,
        }
    }

    pub fn text(depth: usize, width: usize, heads: usize, seq_len: usize, vocab_size: usize, init_seed: u64) -> Self {
        Self {
            modality: Modality::Text,
            depth,
            width,
            heads,
            seq_len,
            vocab_size: Some(vocab_size),
            patch_input_dim: None,
            ffn_mult: default_ffn_mult(),
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.seq_len == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::Config("depth, width, heads and seq_len must all be >= 1".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be >= 1".into()));
        }
        match self.modality {
            Modality::Image => match self.patch_input_dim {
                Some(d) if d > 0 => Ok(()),
                _ => Err(Error::Config("image backbone needs patch_input_dim >= 1".into())),
            },
            Modality::Text => match self.vocab_size {
                Some(v) if v > 0 => Ok(()),
                _ => Err(Error::Config("text backbone needs vocab_size >= 1".into())),
            },
            Modality::Fused => Err(Error::Config("a backbone cannot have the fused modality".into())),
        }
    }
}

/// One sample fed to a backbone.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    /// `seq_len x patch_input_dim` patch tokens.
    Patches(Array2<f32>),
    /// `seq_len` token ids.
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub input: SampleInput,
}

#[derive(Debug, Clone)]
struct BlockWeights<F> {
    ln1_gain: Array1<F>,
    ln1_bias: Array1<F>,
    wq: Array2<F>,
    wk: Array2<F>,
    wv: Array2<F>,
    wo: Array2<F>,
    ln2_gain: Array1<F>,
    ln2_bias: Array1<F>,
    w1: Array2<F>,
    b1: Array1<F>,
    w2: Array2<F>,
    b2: Array1<F>,
}

impl BlockWeights<f32> {
    fn cast<G: Real>(&self) -> BlockWeights<G> {
        let c2 = |a: &Array2<f32>| a.mapv(|v| G::from_f32(v).unwrap());
        let c1 = |a: &Array1<f32>| a.mapv(|v| G::from_f32(v).unwrap());
        BlockWeights {
            ln1_gain: c1(&self.ln1_gain),
            ln1_bias: c1(&self.ln1_bias),
            wq: c2(&self.wq),
            wk: c2(&self.wk),
            wv: c2(&self.wv),
            wo: c2(&self.wo),
            ln2_gain: c1(&self.ln2_gain),
            ln2_bias: c1(&self.ln2_bias),
            w1: c2(&self.w1),
            b1: c1(&self.b1),
            w2: c2(&self.w2),
            b2: c1(&self.b2),
        }
    }

    fn tensors(&self) -> [&[f32]; 12] {
        fn sl2(a: &Array2<f32>) -> &[f32] {
            a.as_slice().expect("standard layout")
        }
        fn sl1(a: &Array1<f32>) -> &[f32] {
            a.as_slice().expect("standard layout")
        }
        [
            sl1(&self.ln1_gain),
            sl1(&self.ln1_bias),
            sl2(&self.wq),
            sl2(&self.wk),
            sl2(&self.wv),
            sl2(&self.wo),
            sl1(&self.ln2_gain),
            sl1(&self.ln2_bias),
            sl2(&self.w1),
            sl1(&self.b1),
            sl2(&self.w2),
            sl1(&self.b2),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    /// Patch projection (`patch_input_dim x width`) or token table (`vocab x width`).
    embed: Array2<f32>,
    blocks: Vec<BlockWeights<f32>>,
}

fn random_matrix(stream: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || (stream.sample::<f64, _>(StandardNormal) * std) as f32)
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stream = rng::keyed(rng::domain::BACKBONE_INIT, config.init_seed, &[config.modality.code() as u64]);
        let w = config.width;
        let hidden = w * config.ffn_mult;

        let embed = match config.modality {
            Modality::Image => {
                let p = config.patch_input_dim.unwrap();
                random_matrix(&mut stream, p, w, 1.0 / (p as f64).sqrt())
            }
            _ => random_matrix(&mut stream, config.vocab_size.unwrap(), w, 1.0),
        };

        // Residual-branch outputs are scaled down with depth so the residual
        // stream stays O(1) through every tap.
        let branch = 1.0 / (2.0 * config.depth as f64).sqrt();
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                ln1_gain: Array1::ones(w),
                ln1_bias: Array1::zeros(w),
                wq: random_matrix(&mut stream, w, w, 1.0 / (w as f64).sqrt()),
                wk: random_matrix(&mut stream, w, w, 1.0 / (w as f64).sqrt()),
                wv: random_matrix(&mut stream, w, w, 1.0 / (w as f64).sqrt()),
                wo: random_matrix(&mut stream, w, w, branch / (w as f64).sqrt()),
                ln2_gain: Array1::ones(w),
                ln2_bias: Array1::zeros(w),
                w1: random_matrix(&mut stream, w, hidden, 1.0 / (w as f64).sqrt()),
                b1: Array1::zeros(hidden),
                w2: random_matrix(&mut stream, hidden, w, branch / (hidden as f64).sqrt()),
                b2: Array1::zeros(w),
            })
            .collect();

        Ok(Self { config, embed, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |vals: &[f32]| {
            for v in vals {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        eat(self.embed.as_slice().expect("standard layout"));
        for block in &self.blocks {
            for t in block.tensors() {
                eat(t);
            }
        }
        h
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let cfg = &self.config;
        match (&sample.input, cfg.modality) {
            (SampleInput::Patches(p), Modality::Image) => {
                let expect = (cfg.seq_len, cfg.patch_input_dim.unwrap());
                if p.dim() != expect {
                    return Err(Error::shape(format!(
                        "sample {} has patches {:?}, backbone expects {:?}",
                        sample.id,
                        p.dim(),
                        expect
                    )));
                }
                Ok(())
            }
            (SampleInput::Tokens(tokens), Modality::Text) => {
                if tokens.len() != cfg.seq_len {
                    return Err(Error::shape(format!(
                        "sample {} has {} tokens, backbone expects {}",
                        sample.id,
                        tokens.len(),
                        cfg.seq_len
                    )));
                }
                let vocab = cfg.vocab_size.unwrap();
                if let Some(bad) = tokens.iter().find(|&&tok| tok as usize >= vocab) {
                    return Err(Error::OutOfRange {
                        what: "token id",
                        value: bad.to_string(),
                        allowed: format!("[0, {vocab})"),
                    });
                }
                Ok(())
            }
            _ => Err(Error::invalid(format!(
                "sample {} does not match the {} backbone",
                sample.id, cfg.modality
            ))),
        }
    }

    /// Clean input `x_0` for the noising step: raw patches for images,
    /// looked-up embeddings for text.
    fn clean_input(&self, sample: &Sample) -> Array2<f32> {
        match &sample.input {
            SampleInput::Patches(p) => p.to_owned(),
            SampleInput::Tokens(tokens) => {
                let mut out = Array2::zeros((tokens.len(), self.config.width));
                for (row, &tok) in out.rows_mut().into_iter().zip(tokens) {
                    let mut row = row;
                    row.assign(&self.embed.row(tok as usize));
                }
                out
            }
        }
    }

    /// Noised, embedded and time-conditioned token matrix fed to block 1.
    fn stem(
        &self,
        sample: &Sample,
        t: usize,
        schedule: &NoiseSchedule,
        mode: NoiseMode,
        seed: u64,
    ) -> Result<Array2<f32>> {
        self.check_sample(sample)?;
        let x0 = self.clean_input(sample);
        let shape = x0.dim();
        let flat = x0.into_raw_vec_and_offset().0;
        let noised = schedule.noise(&flat, t, mode, seed, sample.id)?.xt;
        let xt = Array2::from_shape_vec(shape, noised).expect("shape preserved");
        let mut h = match self.config.modality {
            Modality::Image => xt.dot(&self.embed),
            _ => xt,
        };
        let temb = timestep_embedding(t, self.config.width);
        h += &temb;
        Ok(h)
    }

    /// All `depth` block outputs for one sample (single precision).
    pub fn forward_taps(
        &self,
        sample: &Sample,
        t: usize,
        schedule: &NoiseSchedule,
        mode: NoiseMode,
        seed: u64,
    ) -> Result<Vec<Array2<f32>>> {
        let h = self.stem(sample, t, schedule, mode, seed)?;
        Ok(run_blocks(&self.blocks, self.config.heads, h, self.depth()))
    }

    /// Reference forward in double precision with the same weights.
    pub fn forward_taps_f64(
        &self,
        sample: &Sample,
        t: usize,
        schedule: &NoiseSchedule,
        mode: NoiseMode,
        seed: u64,
    ) -> Result<Vec<Array2<f64>>> {
        let h = self.stem(sample, t, schedule, mode, seed)?.mapv(f64::from);
        let blocks: Vec<BlockWeights<f64>> = self.blocks.iter().map(|b| b.cast()).collect();
        Ok(run_blocks(&blocks, self.config.heads, h, self.depth()))
    }

    fn check_request(&self, n: usize, t: usize, b: usize, schedule: &NoiseSchedule) -> Result<()> {
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if b == 0 || b > self.depth() {
            return Err(Error::OutOfRange {
                what: "block",
                value: b.to_string(),
                allowed: format!("[1, {}]", self.depth()),
            });
        }
        if t > schedule.steps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t.to_string(),
                allowed: format!("[0, {}]", schedule.steps()),
            });
        }
        Ok(())
    }

    fn tap(&self, sample: &Sample, t: usize, b: usize, schedule: &NoiseSchedule, mode: NoiseMode, seed: u64) -> Result<Array2<f32>> {
        let h = self.stem(sample, t, schedule, mode, seed)?;
        let mut taps = run_blocks(&self.blocks, self.config.heads, h, b);
        Ok(taps.pop().expect("b >= 1"))
    }

    /// Block-`b` output for every sample at step `t`, unpooled.
    #[allow(clippy::too_many_arguments)]
    pub fn extract_tokens(
        &self,
        batch: &[Sample],
        t: usize,
        b: usize,
        schedule: &NoiseSchedule,
        mode: NoiseMode,
        seed: u64,
        exec: Execution,
    ) -> Result<TokenFeatures> {
        self.check_request(batch.len(), t, b, schedule)?;
        let taps = exec.try_map(batch, |s| self.tap(s, t, b, schedule, mode, seed))?;
        let (seq, width) = (self.config.seq_len, self.config.width);
        let mut data = Array3::zeros((batch.len(), seq, width));
        for (mut dst, tap) in data.outer_iter_mut().zip(&taps) {
            dst.assign(tap);
        }
        if data.iter().any(|v: &f32| !v.is_finite()) {
            return Err(Error::NonFinite("backbone activations"));
        }
        Ok(TokenFeatures {
            data,
            modality: self.config.modality,
            t,
            b,
        })
    }

    /// Mean-pooled block-`b` features `h_{t,b}`, rows in batch order.
    #[allow(clippy::too_many_arguments)]
    pub fn extract(
        &self,
        batch: &[Sample],
        t: usize,
        b: usize,
        schedule: &NoiseSchedule,
        mode: NoiseMode,
        seed: u64,
        exec: Execution,
    ) -> Result<FeatureMatrix> {
        self.check_request(batch.len(), t, b, schedule)?;
        let rows = exec.try_map(batch, |s| {
            self.tap(s, t, b, schedule, mode, seed)
                .map(|tap| tap.mean_axis(Axis(0)).expect("seq_len >= 1"))
        })?;
        let mut data = Array2::zeros((batch.len(), self.config.width));
        for (mut dst, row) in data.rows_mut().into_iter().zip(&rows) {
            dst.assign(row);
        }
        Ok(FeatureMatrix::new(data, self.config.modality, t, b)?
            .with_provenance(format!("backbone seed={} noise seed={seed} mode={mode:?}", self.config.init_seed)))
    }
}

/// Sinusoidal embedding of `t`: first half sines, second half cosines,
/// frequencies `10000^(-i/half)`.
pub fn timestep_embedding(t: usize, width: usize) -> Array1<f32> {
    let half = width / 2;
    let mut out = Array1::zeros(width);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

fn layer_norm<F: Real>(x: &Array2<F>, gain: &Array1<F>, bias: &Array1<F>) -> Array2<F> {
    let eps = F::from_f64(1e-5).unwrap();
    let width = F::from_usize(x.ncols()).unwrap();
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / width;
        let inv = (var + eps).sqrt().recip();
        row.mapv_inplace(|v| v * inv);
        row.zip_mut_with(gain, |v, &g| *v = *v * g);
        row.zip_mut_with(bias, |v, &b| *v = *v + b);
    }
    out
}

fn softmax_rows<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt()).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let k = F::from_f64(0.044_715).unwrap();
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn attention<F: Real>(x: ArrayView2<F>, w: &BlockWeights<F>, heads: usize) -> Array2<F> {
    let q = x.dot(&w.wq);
    let k = x.dot(&w.wk);
    let v = x.dot(&w.wv);
    let width = x.ncols();
    let dh = width / heads;
    let scale = F::from_usize(dh).unwrap().sqrt().recip();
    let mut mixed = Array2::zeros(x.dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
    }
    mixed.dot(&w.wo)
}

fn block_forward<F: Real>(x: Array2<F>, w: &BlockWeights<F>, heads: usize) -> Array2<F> {
    let normed = layer_norm(&x, &w.ln1_gain, &w.ln1_bias);
    let x = x + attention(normed.view(), w, heads);
    let normed = layer_norm(&x, &w.ln2_gain, &w.ln2_bias);
    let mut hidden = normed.dot(&w.w1) + &w.b1;
    hidden.mapv_inplace(gelu);
    let out = hidden.dot(&w.w2) + &w.b2;
    x + out
}

fn run_blocks<F: Real>(blocks: &[BlockWeights<F>], heads: usize, mut h: Array2<F>, upto: usize) -> Vec<Array2<F>> {
    let mut taps = Vec::with_capacity(upto);
    for w in &blocks[..upto] {
        h = block_forward(h, w, heads);
        taps.push(h.clone());
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn text_backbone(seed: u64) -> Backbone {
        Backbone::new(BackboneConfig::text(4, 32, 4, 6, 50, seed)).unwrap()
    }

    fn text_batch(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: i as u64,
                input: SampleInput::Tokens((0..6).map(|j| ((i * 7 + j * 3) % 50) as u32).collect()),
            })
            .collect()
    }

    fn image_batch(n: usize, seq: usize, dim: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: 100 + i as u64,
                input: SampleInput::Patches(Array2::from_shape_fn((seq, dim), |(r, c)| {
                    ((i * 31 + r * 7 + c) as f32 * 0.13).sin()
                })),
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(Backbone::new(BackboneConfig::text(4, 30, 4, 6, 50, 0)).is_err());
        assert!(Backbone::new(BackboneConfig::text(0, 32, 4, 6, 50, 0)).is_err());
        assert!(Backbone::new(BackboneConfig::text(2, 32, 4, 0, 50, 0)).is_err());
        let mut cfg = BackboneConfig::image(2, 32, 4, 6, 5, 0);
        cfg.patch_input_dim = None;
        assert!(Backbone::new(cfg).is_err());
    }

    #[test]
    fn same_seed_same_weights_and_outputs() {
        let s = schedule();
        let a = text_backbone(7);
        let b = text_backbone(7);
        assert_eq!(a.checksum(), b.checksum());
        let batch = text_batch(3);
        let fa = a.extract(&batch, 20, 3, &s, NoiseMode::Deterministic, 1, Execution::Sequential).unwrap();
        let fb = b.extract(&batch, 20, 3, &s, NoiseMode::Deterministic, 1, Execution::Parallel).unwrap();
        let bits = |m: &FeatureMatrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&fa), bits(&fb));
    }

    #[test]
    fn different_seed_different_outputs() {
        let s = schedule();
        let batch = text_batch(2);
        let fa = text_backbone(7).extract(&batch, 0, 3, &s, NoiseMode::Deterministic, 1, Execution::Sequential).unwrap();
        let fb = text_backbone(8).extract(&batch, 0, 3, &s, NoiseMode::Deterministic, 1, Execution::Sequential).unwrap();
        let diff = fa.data.iter().zip(fb.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn taps_have_expected_shapes() {
        let s = schedule();
        let bb = text_backbone(1);
        let taps = bb.forward_taps(&text_batch(1)[0], 5, &s, NoiseMode::Stochastic, 0).unwrap();
        assert_eq!(taps.len(), 4);
        assert!(taps.iter().all(|t| t.dim() == (6, 32)));
        let batch = text_batch(5);
        for b in [1, 4] {
            let f = bb.extract(&batch, 5, b, &s, NoiseMode::Stochastic, 0, Execution::Sequential).unwrap();
            assert_eq!(f.data.dim(), (5, 32));
            assert_eq!((f.t, f.b), (5, b));
        }
    }

    #[test]
    fn t_zero_text_uses_clean_embeddings() {
        let s = schedule();
        let bb = text_backbone(3);
        let batch = text_batch(2);
        // At t=0 both noise modes and any seed give the same clean path.
        let a = bb.extract(&batch, 0, 2, &s, NoiseMode::Stochastic, 1, Execution::Sequential).unwrap();
        let b = bb.extract(&batch, 0, 2, &s, NoiseMode::Deterministic, 99, Execution::Sequential).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn extraction_does_not_touch_weights() {
        let s = schedule();
        let bb = text_backbone(5);
        let before = bb.checksum();
        for t in [0, 10, 500] {
            bb.extract(&text_batch(2), t, 4, &s, NoiseMode::Stochastic, 3, Execution::Sequential).unwrap();
        }
        assert_eq!(before, bb.checksum());
    }

    #[test]
    fn batch_permutation_is_equivariant() {
        let s = schedule();
        let bb = Backbone::new(BackboneConfig::image(3, 16, 2, 4, 5, 9)).unwrap();
        let batch = image_batch(4, 4, 5);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Sample> = perm.iter().map(|&i| batch[i].clone()).collect();
        let f = bb.extract(&batch, 30, 2, &s, NoiseMode::Deterministic, 4, Execution::Sequential).unwrap();
        let g = bb.extract(&permuted, 30, 2, &s, NoiseMode::Deterministic, 4, Execution::Sequential).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(g.data.row(row), f.data.row(src));
        }
    }

    #[test]
    fn block_taps_are_prefixes() {
        let s = schedule();
        let bb = text_backbone(2);
        let sample = &text_batch(1)[0];
        let full = bb.forward_taps(sample, 40, &s, NoiseMode::Deterministic, 6).unwrap();
        for b in 1..=4 {
            let f = bb.extract(std::slice::from_ref(sample), 40, b, &s, NoiseMode::Deterministic, 6, Execution::Sequential).unwrap();
            let pooled = full[b - 1].mean_axis(Axis(0)).unwrap();
            assert_eq!(f.data.row(0), pooled.view());
        }
    }

    #[test]
    fn single_precision_tracks_double_reference() {
        let s = schedule();
        let bb = Backbone::new(BackboneConfig::image(4, 32, 4, 6, 8, 12)).unwrap();
        let sample = &image_batch(1, 6, 8)[0];
        let lo = bb.forward_taps(sample, 100, &s, NoiseMode::Deterministic, 2).unwrap();
        let hi = bb.forward_taps_f64(sample, 100, &s, NoiseMode::Deterministic, 2).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            let err = a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-4, "max err {err}");
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let s = schedule();
        let bb = text_backbone(1);
        let batch = text_batch(2);
        let ex = Execution::Sequential;
        assert!(bb.extract(&batch, 0, 0, &s, NoiseMode::Deterministic, 0, ex).is_err());
        assert!(bb.extract(&batch, 0, 5, &s, NoiseMode::Deterministic, 0, ex).is_err());
        assert!(bb.extract(&batch, 1001, 1, &s, NoiseMode::Deterministic, 0, ex).is_err());
        assert!(bb.extract(&[], 0, 1, &s, NoiseMode::Deterministic, 0, ex).is_err());
        let bad = [Sample { id: 0, input: SampleInput::Tokens(vec![99; 6]) }];
        assert!(bb.extract(&bad, 0, 1, &s, NoiseMode::Deterministic, 0, ex).is_err());
        let short = [Sample { id: 0, input: SampleInput::Tokens(vec![1; 3]) }];
        assert!(bb.extract(&short, 0, 1, &s, NoiseMode::Deterministic, 0, ex).is_err());
    }
}
