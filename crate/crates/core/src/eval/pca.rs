//! PCA by power iteration with deflation.

use crate::error::{Error, Result};

pub const PCA_ITERATIONS: usize = 200;
pub const PCA_TOLERANCE: f64 = 1e-7;

/// Top `k` eigenpairs of the symmetric `d × d` matrix `m` (row-major),
/// largest first. Each vector is unit length with its largest-magnitude
/// entry positive.
pub fn top_eigenvectors(m: &[f64], d: usize, k: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    if m.len() != d * d {
        return Err(Error::invalid(format!("matrix has {} entries, expected {d}x{d}", m.len())));
    }
    let mut a = m.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..PCA_ITERATIONS {
            let mut next = matvec(&a, &v, d);
            let norm = normalize(&mut next);
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            // Align sign before measuring the change.
            if dot(&next, &v) < 0.0 {
                next.iter_mut().for_each(|x| *x = -*x);
            }
            let delta = next.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            v = next;
            lambda = dot(&v, &matvec(&a, &v, d));
            if delta < PCA_TOLERANCE {
                break;
            }
        }
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    Ok(out)
}

/// Projects the centered `(n, d)` rows onto their top `k` principal axes.
pub fn pca_project(x: &[f64], n: usize, d: usize, k: usize) -> Result<Vec<f64>> {
    if x.len() != n * d || n == 0 {
        return Err(Error::invalid("pca input is empty or ragged"));
    }
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x.chunks_exact(d).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks_exact(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    let axes = top_eigenvectors(&cov, d, k)?;
    let mut out = Vec::with_capacity(n * k);
    for row in centered.chunks_exact(d) {
        for j in 0..k {
            out.push(axes.get(j).map_or(0.0, |(_, v)| dot(row, v)));
        }
    }
    Ok(out)
}

fn matvec(a: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    a.chunks_exact(d).map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
