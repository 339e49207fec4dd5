//! Brute-force reference metrics written from the definitions with plain
//! loops, plus random instance generators. Each `check_*` runs `count`
//! random instances and reports the first disagreement.

use std::collections::BTreeSet;

use diffprobe::metrics::{cluster_quality, evaluate, powerset_report, topk_accuracy};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= 1e-9 * 1f64.max(a.abs()).max(b.abs())
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `j` is ranked ahead of `i`: higher score, or equal score and earlier index.
fn ahead(s: &[f64], j: usize, i: usize) -> bool {
    s[j] > s[i] || (s[j] == s[i] && j < i)
}

pub fn ref_ap(s: &[f64], y: &[u8]) -> Option<f64> {
    let pos: Vec<usize> = (0..s.len()).filter(|&i| y[i] == 1).collect();
    if pos.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &pos {
        let rank = 1 + (0..s.len()).filter(|&j| ahead(s, j, i)).count();
        let hits = 1 + pos.iter().filter(|&&j| ahead(s, j, i)).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / pos.len() as f64)
}

pub struct RefEval {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub ap: Vec<f64>,
    pub f1: Vec<f64>,
    pub without_pos: Vec<usize>,
    pub without_pred: Vec<usize>,
}

pub fn ref_evaluate(scores: &Array2<f64>, truth: &Array2<u8>, threshold: f64) -> Option<RefEval> {
    let (n, k) = scores.dim();
    let mut r = RefEval {
        map: 0.0,
        cp: 0.0,
        cr: 0.0,
        cf1: 0.0,
        op: 0.0,
        or: 0.0,
        of1: 0.0,
        ap: vec![0.0; k],
        f1: vec![0.0; k],
        without_pos: vec![],
        without_pred: vec![],
    };
    let (mut tp_all, mut pred_all, mut pos_all) = (0, 0, 0);
    let mut ap_sum = 0.0;
    for c in 0..k {
        let s: Vec<f64> = (0..n).map(|i| scores[[i, c]]).collect();
        let y: Vec<u8> = (0..n).map(|i| truth[[i, c]]).collect();
        match ref_ap(&s, &y) {
            Some(ap) => {
                r.ap[c] = ap;
                ap_sum += ap;
            }
            None => r.without_pos.push(c),
        }
        let mut tp = 0;
        let mut pred = 0;
        let mut pos = 0;
        for i in 0..n {
            let hit = s[i] >= threshold;
            if hit {
                pred += 1;
            }
            if y[i] == 1 {
                pos += 1;
                if hit {
                    tp += 1;
                }
            }
        }
        let p = if pred == 0 {
            r.without_pred.push(c);
            0.0
        } else {
            tp as f64 / pred as f64
        };
        let rc = if pos == 0 { 0.0 } else { tp as f64 / pos as f64 };
        r.cp += p / k as f64;
        r.cr += rc / k as f64;
        r.f1[c] = f1(p, rc);
        tp_all += tp;
        pred_all += pred;
        pos_all += pos;
    }
    if r.without_pos.len() == k {
        return None;
    }
    r.map = ap_sum / (k - r.without_pos.len()) as f64;
    r.cf1 = f1(r.cp, r.cr);
    r.op = if pred_all == 0 { 0.0 } else { tp_all as f64 / pred_all as f64 };
    r.or = tp_all as f64 / pos_all as f64;
    r.of1 = f1(r.op, r.or);
    Some(r)
}

pub fn ref_topk(scores: &Array2<f64>, truth: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (i, &c) in truth.iter().enumerate() {
        let row: Vec<f64> = scores.row(i).to_vec();
        let mut order: Vec<usize> = (0..row.len()).collect();
        // Stable sort keeps equal scores in index order.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        if order.iter().position(|&j| j == c).unwrap() < k {
            hits += 1;
        }
    }
    hits as f64 / truth.len() as f64
}

/// `(labels, count, exact)` buckets, most frequent first, ties by labels.
pub fn ref_powerset(pred: &[Vec<usize>], truth: &[Vec<usize>], top_m: usize) -> (usize, Vec<(Vec<usize>, usize, usize)>) {
    let mut buckets: Vec<(Vec<usize>, usize, usize)> = Vec::new();
    for (p, t) in pred.iter().zip(truth) {
        let key: Vec<usize> = t.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let pk: Vec<usize> = p.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let exact = usize::from(pk == key);
        match buckets.iter_mut().find(|b| b.0 == key) {
            Some(b) => {
                b.1 += 1;
                b.2 += exact;
            }
            None => buckets.push((key, 1, exact)),
        }
    }
    let distinct = buckets.len();
    buckets.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    buckets.truncate(top_m);
    (distinct, buckets)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// `(dbi, chi, silhouette)` from nested loops over points and clusters.
pub fn ref_cluster(x: &[Vec<f64>], labels: &[usize]) -> (f64, f64, f64) {
    let ids: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let d = x[0].len();
    let n = x.len();
    let mut centroids = Vec::new();
    let mut members = Vec::new();
    for &id in &ids {
        let m: Vec<usize> = (0..n).filter(|&i| labels[i] == id).collect();
        let mut c = vec![0.0; d];
        for &i in &m {
            for j in 0..d {
                c[j] += x[i][j];
            }
        }
        for v in &mut c {
            *v /= m.len() as f64;
        }
        centroids.push(c);
        members.push(m);
    }
    let k = ids.len();

    let scatter: Vec<f64> = (0..k)
        .map(|c| members[c].iter().map(|&i| dist(&x[i], &centroids[c])).sum::<f64>() / members[c].len() as f64)
        .collect();
    let mut dbi = 0.0;
    for a in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for b in 0..k {
            if a != b {
                let sep = dist(&centroids[a], &centroids[b]);
                let r = if sep == 0.0 { f64::INFINITY } else { (scatter[a] + scatter[b]) / sep };
                worst = worst.max(r);
            }
        }
        dbi += worst;
    }
    dbi /= k as f64;

    let mut mean = vec![0.0; d];
    for row in x {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
        }
    }
    let mut between = 0.0;
    let mut within = 0.0;
    for c in 0..k {
        between += members[c].len() as f64 * dist(&centroids[c], &mean).powi(2);
        for &i in &members[c] {
            within += dist(&x[i], &centroids[c]).powi(2);
        }
    }
    let chi = if within == 0.0 {
        1.0
    } else {
        (between / (k - 1) as f64) / (within / (n - k) as f64)
    };

    let mut sil = 0.0;
    for i in 0..n {
        let own = ids.iter().position(|&id| id == labels[i]).unwrap();
        if members[own].len() == 1 {
            continue;
        }
        let a = members[own].iter().filter(|&&j| j != i).map(|&j| dist(&x[i], &x[j])).sum::<f64>()
            / (members[own].len() - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own {
                let m = members[c].iter().map(|&j| dist(&x[i], &x[j])).sum::<f64>() / members[c].len() as f64;
                b = b.min(m);
            }
        }
        if a.max(b) > 0.0 {
            sil += (b - a) / a.max(b);
        }
    }
    (dbi, chi, sil / n as f64)
}

/// Scores drawn either continuously or from a five-level grid so that ties
/// and exact threshold hits occur.
fn random_scores(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
    let quantized = rng.random_bool(0.5);
    Array2::from_shape_fn((n, k), |_| {
        if quantized {
            rng.random_range(0..5) as f64 * 0.25
        } else {
            rng.random_range(0.0..1.0)
        }
    })
}

pub fn check_evaluate(count: u64) -> Result<usize, String> {
    let mut compared = 0;
    for seed in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (rng.random_range(1..=64), rng.random_range(1..=8));
        let scores = random_scores(&mut rng, n, k);
        let density = rng.random_range(0.02..0.6);
        let truth = Array2::from_shape_fn((n, k), |_| u8::from(rng.random_bool(density)));
        let got = evaluate(scores.view(), truth.view(), 0.5);
        let Some(want) = ref_evaluate(&scores, &truth, 0.5) else {
            if got.is_ok() {
                return Err(format!("seed {seed}: expected an error without positives"));
            }
            continue;
        };
        let got = got.map_err(|e| format!("seed {seed}: {e}"))?;
        let pairs = [
            (got.map, want.map),
            (got.cp, want.cp),
            (got.cr, want.cr),
            (got.cf1, want.cf1),
            (got.op, want.op),
            (got.or, want.or),
            (got.of1, want.of1),
        ];
        let scalars_ok = pairs.iter().all(|&(a, b)| close(a, b));
        let vectors_ok = got.per_class_ap.iter().zip(&want.ap).all(|(&a, &b)| close(a, b))
            && got.per_class_f1.iter().zip(&want.f1).all(|(&a, &b)| close(a, b))
            && got.classes_without_positives == want.without_pos
            && got.classes_without_predictions == want.without_pred;
        if !(scalars_ok && vectors_ok) {
            return Err(format!("seed {seed}: evaluate disagrees with the reference"));
        }
        compared += 1;
    }
    Ok(compared)
}

pub fn check_topk(count: u64) -> Result<usize, String> {
    for seed in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + seed);
        let (n, k) = (rng.random_range(1..=64), rng.random_range(1..=8));
        let scores = random_scores(&mut rng, n, k);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        for top in 1..=k {
            let got = topk_accuracy(scores.view(), &truth, top).map_err(|e| format!("seed {seed}: {e}"))?;
            if got != ref_topk(&scores, &truth, top) {
                return Err(format!("seed {seed}, k={top}: top-k disagrees"));
            }
        }
    }
    Ok(count as usize)
}

pub fn check_powerset(count: u64) -> Result<usize, String> {
    for seed in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + seed);
        let (n, k) = (rng.random_range(1..=64), rng.random_range(1..=8));
        let subset = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let size = rng.random_range(0..=3.min(k));
            (0..size).map(|_| rng.random_range(0..k)).collect()
        };
        let truth: Vec<Vec<usize>> = (0..n).map(|_| subset(&mut rng)).collect();
        let pred: Vec<Vec<usize>> = truth
            .iter()
            .map(|t| if rng.random_bool(0.6) { t.iter().rev().copied().collect() } else { subset(&mut rng) })
            .collect();
        let top_m = rng.random_range(1..=12);
        let got = powerset_report(&pred, &truth, top_m).map_err(|e| format!("seed {seed}: {e}"))?;
        let (distinct, want) = ref_powerset(&pred, &truth, top_m);
        let same = got.total == n
            && got.distinct == distinct
            && got.top_m == top_m
            && got.buckets.len() == want.len()
            && got.buckets.iter().zip(&want).all(|(g, w)| {
                g.labels == w.0 && g.count == w.1 && g.exact_matches == w.2 && g.accuracy == w.2 as f64 / w.1 as f64
            });
        if !same {
            return Err(format!("seed {seed}: powerset report disagrees"));
        }
    }
    Ok(count as usize)
}

pub fn check_cluster(count: u64) -> Result<usize, String> {
    for seed in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(3_000 + seed);
        let n = rng.random_range(3..=64);
        let k = rng.random_range(2..=8.min(n - 1));
        let d = rng.random_range(1..=6);
        // Arbitrary, non-contiguous ids; every cluster gets at least one member.
        let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        for l in &mut labels {
            *l = *l * 7 + 3;
        }
        let offsets: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let x: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..d).map(|j| offsets[(l - 3) / 7][j] + rng.random_range(-1.0..1.0)).collect())
            .collect();
        let arr = Array2::from_shape_fn((n, d), |(i, j)| x[i][j]);
        let got = cluster_quality(arr.view(), &labels).map_err(|e| format!("seed {seed}: {e}"))?;
        let (dbi, chi, sil) = ref_cluster(&x, &labels);
        if !(close(got.dbi, dbi) && close(got.chi, chi) && close(got.silhouette, sil)) {
            return Err(format!(
                "seed {seed}: ({}, {}, {}) vs reference ({dbi}, {chi}, {sil})",
                got.dbi, got.chi, got.silhouette
            ));
        }
    }
    Ok(count as usize)
}
