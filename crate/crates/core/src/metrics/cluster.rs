//! Internal clustering indices on Euclidean embeddings: Davies-Bouldin,
//! Calinski-Harabasz and mean silhouette.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub dbi: f64,
    pub chi: f64,
    pub silhouette: f64,
}

fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Maps arbitrary cluster ids onto `0..k` in order of first appearance.
fn compact_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = Vec::new();
    let ids = labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(p) => p,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect();
    (ids, seen.len())
}

struct Partition {
    ids: Vec<usize>,
    sizes: Vec<usize>,
    centroids: Array2<f64>,
}

impl Partition {
    fn k(&self) -> usize {
        self.sizes.len()
    }
}

fn partition(embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<Partition> {
    let n = embeddings.nrows();
    if n != labels.len() {
        return Err(Error::shape(format!("{n} embeddings vs {} labels", labels.len())));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embeddings"));
    }
    let (ids, k) = compact_ids(labels);
    if k < 2 {
        return Err(Error::Degenerate(format!("need at least 2 clusters, got {k}")));
    }
    let mut sizes = vec![0usize; k];
    let mut centroids = Array2::<f64>::zeros((k, embeddings.ncols()));
    for (row, &c) in embeddings.rows().into_iter().zip(&ids) {
        sizes[c] += 1;
        let mut dst = centroids.row_mut(c);
        dst += &row;
    }
    for (mut row, &size) in centroids.rows_mut().into_iter().zip(&sizes) {
        row /= size as f64;
    }
    Ok(Partition { ids, sizes, centroids })
}

/// Mean over clusters of the worst `(s_i + s_j) / d(c_i, c_j)`, with `s`
/// the mean distance of members to their centroid.
pub fn davies_bouldin(embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let p = partition(embeddings, labels)?;
    let k = p.k();
    let mut scatter = vec![0.0; k];
    for (row, &c) in embeddings.rows().into_iter().zip(&p.ids) {
        scatter[c] += euclidean(row, p.centroids.row(c));
    }
    for (s, &size) in scatter.iter_mut().zip(&p.sizes) {
        *s /= size as f64;
    }
    let mut dbi = 0.0;
    for i in 0..k {
        let worst = (0..k)
            .filter(|&j| j != i)
            .map(|j| {
                let sep = euclidean(p.centroids.row(i), p.centroids.row(j));
                if sep > 0.0 {
                    (scatter[i] + scatter[j]) / sep
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
        dbi += worst;
    }
    Ok(dbi / k as f64)
}

/// Between-cluster dispersion over `k - 1` divided by within-cluster
/// dispersion over `n - k`. Returns 1 when the within term is zero.
pub fn calinski_harabasz(embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let p = partition(embeddings, labels)?;
    let (n, k) = (embeddings.nrows(), p.k());
    if n <= k {
        return Err(Error::Degenerate("Calinski-Harabasz needs more points than clusters".into()));
    }
    let overall: Array1<f64> = embeddings.mean_axis(Axis(0)).expect("n >= 2");
    let between: f64 = (0..k)
        .map(|c| p.sizes[c] as f64 * euclidean(p.centroids.row(c), overall.view()).powi(2))
        .sum();
    let within: f64 = embeddings
        .rows()
        .into_iter()
        .zip(&p.ids)
        .map(|(row, &c)| euclidean(row, p.centroids.row(c)).powi(2))
        .sum();
    if within == 0.0 {
        return Ok(1.0);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Mean of `(b - a) / max(a, b)` over all points. Members of singleton
/// clusters contribute 0, as do points with `a = b = 0`.
pub fn silhouette(embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let p = partition(embeddings, labels)?;
    let (n, k) = (embeddings.nrows(), p.k());
    if p.sizes.iter().all(|&s| s == 1) {
        return Err(Error::Degenerate("silhouette undefined when every cluster is a singleton".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let ci = p.ids[i];
        if p.sizes[ci] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[p.ids[j]] += euclidean(embeddings.row(i), embeddings.row(j));
            }
        }
        let a = sums[ci] / (p.sizes[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci)
            .map(|c| sums[c] / p.sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

pub fn cluster_quality(embeddings: ArrayView2<f64>, labels: &[usize]) -> Result<ClusterQuality> {
    Ok(ClusterQuality {
        dbi: davies_bouldin(embeddings, labels)?,
        chi: calinski_harabasz(embeddings, labels)?,
        silhouette: silhouette(embeddings, labels)?,
    })
}
