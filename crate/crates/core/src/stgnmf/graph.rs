//! Heat-kernel affinity graphs and their Laplacians.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Heat-kernel bandwidth `δ` in `exp(-‖x_i - x_j‖² / δ)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Mean squared distance over all pairs `i ≠ j`.
    #[default]
    Auto,
    Fixed(f64),
}

/// Squared Euclidean distances between the columns of `x`.
pub fn pairwise_sq_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.ncols();
    let norms: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.dot(&c)).collect();
    let gram = x.t().dot(&x);
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            // direct sum for accuracy on near-duplicates
            let dij = if norms[i] + norms[j] - 2.0 * gram[[i, j]] < 1e-8 * (norms[i] + norms[j]) {
                x.column(i)
                    .iter()
                    .zip(x.column(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            } else {
                norms[i] + norms[j] - 2.0 * gram[[i, j]]
            };
            d[[i, j]] = dij;
            d[[j, i]] = dij;
        }
    }
    d
}

/// Resolves `bandwidth` against a squared-distance matrix.
pub fn resolve_bandwidth(sq_dist: &Array2<f64>, bandwidth: Bandwidth) -> Result<f64> {
    match bandwidth {
        Bandwidth::Fixed(d) if d > 0.0 && d.is_finite() => Ok(d),
        Bandwidth::Fixed(d) => Err(Error::Parameter(format!("bandwidth must be positive, got {d}"))),
        Bandwidth::Auto => {
            let n = sq_dist.nrows();
            if n < 2 {
                return Err(Error::Bandwidth("automatic bandwidth needs two vectors".into()));
            }
            let mut sum = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    sum += sq_dist[[i, j]];
                }
            }
            let mean = sum / (n * (n - 1) / 2) as f64;
            if mean > 0.0 {
                Ok(mean)
            } else {
                Err(Error::Bandwidth(
                    "all vectors identical; automatic bandwidth undefined".into(),
                ))
            }
        }
    }
}

/// Heat-kernel affinities between the columns of `x`, with the bandwidth
/// actually used.
///
/// With `knn = Some(k)` an off-diagonal entry survives only if either end is
/// among the other's `k` nearest neighbours (union rule); the diagonal stays
/// at 1.
pub fn heat_kernel_matrix(x: ArrayView2<f64>, bandwidth: Bandwidth, knn: Option<usize>) -> Result<(Array2<f64>, f64)> {
    let n = x.ncols();
    if n < 2 {
        return Err(Error::Input("heat kernel needs at least two vectors".into()));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("heat kernel inputs must be finite".into()));
    }
    let d2 = pairwise_sq_distances(x);
    let delta = resolve_bandwidth(&d2, bandwidth)?;
    let mut w = d2.mapv(|d| (-d / delta).exp());
    w.diag_mut().fill(1.0);
    if let Some(k) = knn {
        sparsify_union_knn(&mut w, &d2, k)?;
    }
    Ok((w, delta))
}

fn sparsify_union_knn(w: &mut Array2<f64>, d2: &Array2<f64>, k: usize) -> Result<()> {
    let n = w.nrows();
    if k == 0 {
        return Err(Error::Parameter("knn must be positive".into()));
    }
    let mut keep = Array2::from_elem((n, n), false);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d2[[i, a]].total_cmp(&d2[[i, b]]).then(a.cmp(&b)));
        for &j in others.iter().take(k) {
            keep[[i, j]] = true;
            keep[[j, i]] = true;
        }
        keep[[i, i]] = true;
    }
    for ((i, j), v) in w.indexed_iter_mut() {
        if !keep[[i, j]] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Blended affinity graph `W = βW^F + (1-β)W^D`, its degrees and
/// Laplacian `L = D - W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub w_feature: Array2<f64>,
    pub w_distribution: Array2<f64>,
    pub beta: f64,
    pub w: Array2<f64>,
    pub degree: Array1<f64>,
    pub laplacian: Array2<f64>,
}

pub fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")))
    }
}

pub fn blend_graph(w_feature: Array2<f64>, w_distribution: Array2<f64>, beta: f64) -> Result<AffinityGraph> {
    check_beta(beta)?;
    if w_feature.dim() != w_distribution.dim() || w_feature.nrows() != w_feature.ncols() {
        return Err(Error::Input(format!(
            "affinity shapes {:?} and {:?} must be equal and square",
            w_feature.dim(),
            w_distribution.dim()
        )));
    }
    let w = &w_feature * beta + &w_distribution * (1.0 - beta);
    Ok(graph_from_weights(w_feature, w_distribution, beta, w))
}

/// Graph over a single weight matrix (plain GNMF).
pub fn graph_from_single(w: Array2<f64>) -> Result<AffinityGraph> {
    if w.nrows() != w.ncols() {
        return Err(Error::Input("weight matrix must be square".into()));
    }
    let n = w.nrows();
    Ok(graph_from_weights(w.clone(), Array2::zeros((n, n)), 1.0, w))
}

fn graph_from_weights(w_feature: Array2<f64>, w_distribution: Array2<f64>, beta: f64, w: Array2<f64>) -> AffinityGraph {
    let degree = w.sum_axis(Axis(1));
    let mut laplacian = -&w;
    for i in 0..w.nrows() {
        laplacian[[i, i]] += degree[i];
    }
    AffinityGraph {
        w_feature,
        w_distribution,
        beta,
        w,
        degree,
        laplacian,
    }
}
