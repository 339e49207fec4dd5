//! Analytic gradients against central finite differences of a loss that is
//! recomputed here with plain loops, independent of the library forward pass.

use diffprobe::fusion::{FusionDims, FusionInputs, FusionObjective, FusionStrategy};
use diffprobe::optim::Objective;
use diffprobe::probe::{LinearObjective, LossKind};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize, kind: LossKind) -> Array2<u8> {
    let mut y = Array2::zeros((n, k));
    for i in 0..n {
        match kind {
            LossKind::BceMultilabel => {
                for c in 0..k {
                    y[[i, c]] = u8::from(rng.random_bool(0.4));
                }
            }
            LossKind::CeSinglelabel => y[[i, rng.random_range(0..k)]] = 1,
        }
    }
    y
}

pub fn naive_head_loss(fused: &[Vec<f64>], w: &[f64], b: &[f64], y: &Array2<u8>, kind: LossKind) -> f64 {
    let k = b.len();
    let d = fused[0].len();
    let mut total = 0.0;
    for (i, f) in fused.iter().enumerate() {
        let z: Vec<f64> = (0..k).map(|c| b[c] + (0..d).map(|j| w[c * d + j] * f[j]).sum::<f64>()).collect();
        match kind {
            LossKind::BceMultilabel => {
                for c in 0..k {
                    let p = 1.0 / (1.0 + (-z[c]).exp());
                    let t = y[[i, c]] as f64;
                    total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                }
            }
            LossKind::CeSinglelabel => {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let c = (0..k).find(|&c| y[[i, c]] == 1).unwrap();
                total += lse - z[c];
            }
        }
    }
    match kind {
        LossKind::BceMultilabel => total / (fused.len() * k) as f64,
        LossKind::CeSinglelabel => total / fused.len() as f64,
    }
}

fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect()
}

pub struct Case {
    pub strategy: FusionStrategy,
    pub dims: FusionDims,
    pub img_tok: Array3<f64>,
    pub txt_tok: Array3<f64>,
    pub img: Array2<f64>,
    pub txt: Array2<f64>,
    pub y: Array2<u8>,
    pub kind: LossKind,
}

impl Case {
    pub fn new(strategy: FusionStrategy, kind: LossKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=8);
        let (si, st) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (di, dt) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let k = rng.random_range(2..=4);
        let dims = FusionDims {
            d_alg: rng.random_range(1..=4),
            d_k: rng.random_range(1..=4),
        };
        let img_tok = Array3::from_shape_fn((n, si, di), |_| rng.random_range(-1.0..1.0));
        let txt_tok = Array3::from_shape_fn((n, st, dt), |_| rng.random_range(-1.0..1.0));
        let img = img_tok.mean_axis(ndarray::Axis(1)).unwrap();
        let txt = txt_tok.mean_axis(ndarray::Axis(1)).unwrap();
        let y = labels(&mut rng, n, k, kind);
        Self {
            strategy,
            dims,
            img_tok,
            txt_tok,
            img,
            txt,
            y,
            kind,
        }
    }

    pub fn objective(&self) -> FusionObjective<'_> {
        FusionObjective {
            strategy: self.strategy,
            dims: self.dims,
            inputs: FusionInputs {
                img: self.img.view(),
                txt: self.txt.view(),
                img_tokens: Some(self.img_tok.view()),
                txt_tokens: Some(self.txt_tok.view()),
            },
            targets: self.y.view(),
            kind: self.kind,
        }
    }

    /// Fused rows computed with loops; returns the number of fusion params consumed.
    fn naive_fused(&self, p: &[f64]) -> (Vec<Vec<f64>>, usize) {
        let (n, di, dt) = (self.img.nrows(), self.img.ncols(), self.txt.ncols());
        let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
        match self.strategy {
            FusionStrategy::SimpleConcat => {
                let fused = (0..n)
                    .map(|i| {
                        let a = row(&self.img, i);
                        let b = row(&self.txt, i);
                        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                        a.iter().map(|v| v / na).chain(b.iter().map(|v| v / nb)).collect()
                    })
                    .collect();
                (fused, 0)
            }
            FusionStrategy::LinearConcat | FusionStrategy::LinearAddition => {
                let da = self.dims.d_alg;
                let wi = &p[..da * di];
                let wt = &p[da * di..da * (di + dt)];
                let fused = (0..n)
                    .map(|i| {
                        let a = matvec(wi, da, &row(&self.img, i));
                        let b = matvec(wt, da, &row(&self.txt, i));
                        if self.strategy == FusionStrategy::LinearConcat {
                            a.into_iter().chain(b).collect()
                        } else {
                            a.iter().zip(&b).map(|(x, y)| x + y).collect()
                        }
                    })
                    .collect();
                (fused, da * (di + dt))
            }
            FusionStrategy::CrossAttention => {
                let dk = self.dims.d_k;
                let wq = &p[..dk * di];
                let wk = &p[dk * di..dk * (di + dt)];
                let wv = &p[dk * (di + dt)..dk * (di + 2 * dt)];
                let fused = (0..n)
                    .map(|i| {
                        let xi: Vec<Vec<f64>> = self.img_tok.index_axis(ndarray::Axis(0), i).rows().into_iter().map(|r| r.to_vec()).collect();
                        let xt: Vec<Vec<f64>> = self.txt_tok.index_axis(ndarray::Axis(0), i).rows().into_iter().map(|r| r.to_vec()).collect();
                        let q: Vec<Vec<f64>> = xi.iter().map(|x| matvec(wq, dk, x)).collect();
                        let k: Vec<Vec<f64>> = xt.iter().map(|x| matvec(wk, dk, x)).collect();
                        let v: Vec<Vec<f64>> = xt.iter().map(|x| matvec(wv, dk, x)).collect();
                        let mut out = vec![0.0; dk];
                        for qi in &q {
                            let scores: Vec<f64> = k
                                .iter()
                                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                                .collect();
                            let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
                            let z: f64 = e.iter().sum();
                            for (j, vj) in v.iter().enumerate() {
                                for c in 0..dk {
                                    out[c] += e[j] / z * vj[c] / q.len() as f64;
                                }
                            }
                        }
                        out
                    })
                    .collect();
                (fused, dk * (di + 2 * dt))
            }
        }
    }

    pub fn naive_loss(&self, p: &[f64]) -> f64 {
        let (fused, off) = self.naive_fused(p);
        let k = self.y.ncols();
        let d = fused[0].len();
        naive_head_loss(&fused, &p[off..off + k * d], &p[off + k * d..], &self.y, self.kind)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of `loss`.
pub fn fd_error(analytic: &[f64], loss: impl Fn(&[f64]) -> f64, params: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        let mut at = |step: f64| {
            p[i] = orig + step;
            loss(&p)
        };
        // Five-point central stencil, fourth-order accurate.
        let fd = (at(-2.0 * H) - 8.0 * at(-H) + 8.0 * at(H) - at(2.0 * H)) / (12.0 * H);
        p[i] = orig;
        // Entries that are numerically zero on both sides carry no signal.
        if fd.abs() < 1e-9 && analytic[i].abs() < 1e-9 {
            continue;
        }
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

/// Worst gradient error and worst forward mismatch of the linear probe on
/// one random instance.
pub fn probe_case(kind: LossKind, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (rng.random_range(2..=8), rng.random_range(1..=8), rng.random_range(2..=4));
    let x = randn(&mut rng, (n, d));
    let y = labels(&mut rng, n, k, kind);
    let obj = LinearObjective { inputs: x.view(), targets: y.view(), kind };
    let params: Vec<f64> = (0..obj.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (loss, grad) = obj.full_loss_grad(&params);
    let naive = |p: &[f64]| {
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        naive_head_loss(&rows, &p[..k * d], &p[k * d..], &y, kind)
    };
    (fd_error(&grad, naive, &params), (loss - naive(&params)).abs())
}

/// Same as [`probe_case`] for a fusion strategy trained jointly with its head.
pub fn fusion_case(strategy: FusionStrategy, kind: LossKind, seed: u64) -> (f64, f64) {
    let case = Case::new(strategy, kind, seed);
    let obj = case.objective();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Perturb the deterministic init so attention is far from uniform.
    let params: Vec<f64> = obj.init_params(seed).iter().map(|v| v * 2.0 + rng.random_range(-0.3..0.3)).collect();
    let (loss, grad) = obj.full_loss_grad(&params);
    let forward = (loss - case.naive_loss(&params)).abs();
    (fd_error(&grad, |p| case.naive_loss(p), &params), forward)
}

/// Worst `(gradient error, forward mismatch)` over every head and strategy
/// for `seeds` random instances each.
pub fn all_cases(seeds: u64) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for kind in [LossKind::BceMultilabel, LossKind::CeSinglelabel] {
        for seed in 0..seeds {
            let mut cases = vec![probe_case(kind, seed)];
            for strategy in FusionStrategy::ALL {
                cases.push(fusion_case(strategy, kind, seed));
            }
            for (g, f) in cases {
                worst = (worst.0.max(g), worst.1.max(f));
            }
        }
    }
    worst
}
