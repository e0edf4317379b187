use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("labelings of different lengths ({a} vs {b})")));
    }
    if a == 0 {
        return Err(Error::invalid("empty labeling"));
    }
    Ok(())
}

fn dense_ids<L: Eq + Hash + Copy>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

/// Contingency table `n_ij` of two labelings (rows follow `a`).
pub fn contingency<A, B>(a: &[A], b: &[B]) -> Result<Vec<Vec<usize>>>
where
    A: Eq + Hash + Copy,
    B: Eq + Hash + Copy,
{
    check_lengths(a.len(), b.len())?;
    let (ia, ra) = dense_ids(a);
    let (ib, rb) = dense_ids(b);
    let mut table = vec![vec![0usize; rb]; ra];
    for (&i, &j) in ia.iter().zip(&ib) {
        table[i][j] += 1;
    }
    Ok(table)
}

fn marginals(table: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (rows, cols)
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mi_from_table(table: &[Vec<usize>], rows: &[usize], cols: &[usize], n: usize) -> f64 {
    let nf = n as f64;
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let v = nij as f64;
                mi += v / nf * (nf * v / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information (natural log) between two labelings.
pub fn mutual_info<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + Hash + Copy,
    B: Eq + Hash + Copy,
{
    let table = contingency(a, b)?;
    let (rows, cols) = marginals(&table);
    Ok(mi_from_table(&table, &rows, &cols, a.len()))
}

/// Expected mutual information under random permutation with fixed
/// marginals (hypergeometric cell counts).
fn expected_mi(rows: &[usize], cols: &[usize], n: usize) -> f64 {
    let mut lf = vec![0.0f64; n + 1];
    for k in 1..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in rows {
        for &b in cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = lf[a] + lf[b] + lf[n - a] + lf[n - b] - lf[n];
            for nij in lo..=hi {
                let v = nij as f64;
                let log_p = fixed - lf[nij] - lf[a - nij] - lf[b - nij] - lf[n + nij - a - b];
                emi += v / nf * (nf * v / (a as f64 * b as f64)).ln() * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with arithmetic-mean entropy normalization.
///
/// Two single-cluster labelings score 1.0, as do any two identical
/// partitions.
pub fn adjusted_mutual_info<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + Hash + Copy,
    B: Eq + Hash + Copy,
{
    let table = contingency(a, b)?;
    let n = a.len();
    let (rows, cols) = marginals(&table);
    if rows.len() == 1 && cols.len() == 1 {
        return Ok(1.0);
    }
    let identical = rows.len() == cols.len() && table.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
    if identical {
        return Ok(1.0);
    }
    let mi = mi_from_table(&table, &rows, &cols, n);
    let emi = expected_mi(&rows, &cols, n);
    let mean_h = 0.5 * (entropy(&rows, n) + entropy(&cols, n));
    let mut denom = mean_h - emi;
    let tiny = f64::EPSILON;
    if denom.abs() < tiny {
        denom = if denom < 0.0 { -tiny } else { tiny };
    }
    Ok((mi - emi) / denom)
}

/// Fowlkes-Mallows index over sample pairs, 0 when either labeling has no
/// same-cluster pair.
pub fn fowlkes_mallows<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + Hash + Copy,
    B: Eq + Hash + Copy,
{
    let table = contingency(a, b)?;
    let (rows, cols) = marginals(&table);
    let pairs = |c: usize| (c * c.saturating_sub(1) / 2) as f64;
    let tp: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let same_a: f64 = rows.iter().map(|&c| pairs(c)).sum();
    let same_b: f64 = cols.iter().map(|&c| pairs(c)).sum();
    if same_a == 0.0 || same_b == 0.0 {
        return Ok(0.0);
    }
    Ok(tp / (same_a * same_b).sqrt())
}
