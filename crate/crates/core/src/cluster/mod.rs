//! DBSCAN pseudo-labelling and partition-agreement metrics.

mod metrics;

pub use metrics::{adjusted_mutual_info, contingency, fowlkes_mallows, mutual_info};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

/// Label of a point that belongs to no cluster.
pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 − cos(a, b)`, i.e. computed on L2-normalized rows.
    Cosine,
    /// Plain Euclidean distance on the raw rows.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanConfig {
    pub epsilon: f64,
    pub min_points: usize,
    pub metric: Metric,
    /// When set, `epsilon` is replaced on every call by the mean of the
    /// smallest `rho` fraction of the pairwise distances.
    pub rho: Option<f64>,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig {
            epsilon: 0.5,
            min_points: 4,
            metric: Metric::Cosine,
            rho: None,
        }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("dbscan.epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if self.min_points == 0 {
            return Err(Error::config("dbscan.min_points", "must be at least 1"));
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::config("dbscan.rho", format!("must lie in (0, 1], got {rho}")));
            }
        }
        Ok(())
    }
}

/// Per-sample cluster ids (`NOISE` for outliers).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<i32>,
    pub num_clusters: usize,
    pub core: Vec<bool>,
}

impl ClusterAssignment {
    pub fn num_noise(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Indices of the non-noise samples with their cluster id.
    pub fn clustered(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != NOISE)
            .map(|(i, &l)| (i, l as usize))
    }

    /// Member count of every cluster.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for (_, c) in self.clustered() {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Full pairwise distance matrix (row-major `n × n`).
pub fn pairwise_distances<T: Scalar>(points: &Tensor<T>, metric: Metric) -> Result<Vec<f64>> {
    let s = points.shape();
    let (n, d) = (s.n, s.row_len());
    if n == 0 {
        return Err(Error::invalid("dbscan on an empty point set"));
    }
    if d == 0 {
        return Err(Error::shape("dbscan", "zero-dimensional points"));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite { op: "dbscan" });
    }
    let mut x: Vec<f64> = points.data().iter().map(|v| v.as_f64()).collect();
    if metric == Metric::Cosine {
        for row in x.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut gram = vec![0.0; n * n];
    match metric {
        Metric::Cosine => {
            matmul(&x, false, &x, true, &mut gram, n, d, n, false);
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    gram[k] = if i == j { 0.0 } else { (1.0 - gram[k]).max(0.0) };
                }
            }
        }
        // direct differences keep boundary comparisons exact
        Metric::Euclidean => {
            for i in 0..n {
                for j in i + 1..n {
                    let a = &x[i * d..(i + 1) * d];
                    let b = &x[j * d..(j + 1) * d];
                    let v = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                    gram[i * n + j] = v;
                    gram[j * n + i] = v;
                }
            }
        }
    }
    Ok(gram)
}

/// Classical DBSCAN.
///
/// A point is core when at least `min_points` points (itself included) lie
/// within `epsilon` inclusive. Clusters are the connected components of core
/// points, numbered by their lowest core index; a border point joins the
/// cluster of its lowest-indexed core neighbour.
pub fn dbscan<T: Scalar>(points: &Tensor<T>, cfg: &DbscanConfig) -> Result<ClusterAssignment> {
    cfg.validate()?;
    let n = points.shape().n;
    let dist = pairwise_distances(points, cfg.metric)?;
    let eps = match cfg.rho {
        Some(rho) => adaptive_epsilon(&dist, n, rho),
        None => cfg.epsilon,
    };
    Ok(dbscan_from_distances(&dist, n, eps, cfg.min_points))
}

/// Mean of the smallest `ceil(rho · n(n−1)/2)` distinct-pair distances.
pub fn adaptive_epsilon(dist: &[f64], n: usize, rho: f64) -> f64 {
    let mut pairs: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist[i * n + j]).collect();
    if pairs.is_empty() {
        return 0.0;
    }
    let k = ((rho * pairs.len() as f64).ceil() as usize).clamp(1, pairs.len());
    pairs.select_nth_unstable_by(k - 1, f64::total_cmp);
    pairs[..k].iter().sum::<f64>() / k as f64
}

/// DBSCAN on a row-major `n × n` distance matrix.
pub fn dbscan_from_distances(dist: &[f64], n: usize, epsilon: f64, min_points: usize) -> ClusterAssignment {
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist[i * n + j] <= epsilon).collect())
        .collect();
    dbscan_from_neighbours(&neighbours, min_points)
}

/// DBSCAN over precomputed epsilon-neighbourhoods (each including the point itself).
pub fn dbscan_from_neighbours(neighbours: &[Vec<usize>], min_points: usize) -> ClusterAssignment {
    let n = neighbours.len();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_points).collect();
    let mut labels = vec![NOISE; n];
    let mut next = 0i32;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if core[q] && labels[q] == NOISE {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        if let Some(&c) = neighbours[i].iter().filter(|&&j| core[j]).min() {
            labels[i] = labels[c];
        }
    }
    ClusterAssignment {
        labels,
        num_clusters: next as usize,
        core,
    }
}
