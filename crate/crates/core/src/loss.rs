//! Classification and metric-learning losses over pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Scalar, Shape, Tensor, Var};

/// Pairwise distance used by the triplet loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Euclidean,
    /// `1 − cos(a, b)`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: Distance,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.3,
            distance: Distance::Euclidean,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::config("triplet.margin", format!("must be a finite value >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

struct CrossEntropyOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Op<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let n = self.labels.len();
        let k = self.probs.len() / n;
        let scale = grad[0] / T::of(n as f64);
        let dx = needs[0].then(|| {
            let mut d: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
            for (i, &y) in self.labels.iter().enumerate() {
                d[i * k + y] = d[i * k + y] - scale;
            }
            d
        });
        vec![dx]
    }
}

/// Mean negative log-likelihood of `labels` under the row softmax of
/// `logits` (`n × k`).
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits);
    s.require_nonempty("cross_entropy")?;
    let (n, k) = (s.n, s.row_len());
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let x = g.value(logits).data();
    let mut probs = Vec::with_capacity(n * k);
    let mut total = 0.0f64;
    for (row, &y) in x.chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total += (z.ln() + max - row[y]).as_f64();
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    let out = Tensor::scalar(T::of(total / n as f64));
    g.record(
        CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
        },
        &[logits],
        out,
    )
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn distance<T: Scalar>(kind: Distance, a: &[T], b: &[T]) -> T {
    match kind {
        Distance::Euclidean => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt(),
        Distance::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == T::zero() || nb == T::zero() {
                T::one()
            } else {
                T::one() - dot(a, b) / (na * nb)
            }
        }
    }
}

/// Adds `scale · ∂dist(a, b)/∂a` to `da` and the `b` counterpart to `db`.
fn distance_grad<T: Scalar>(kind: Distance, a: &[T], b: &[T], scale: T, da: &mut [T], db: &mut [T]) {
    match kind {
        Distance::Euclidean => {
            let d = distance(kind, a, b);
            if d == T::zero() {
                return;
            }
            for i in 0..a.len() {
                let v = scale * (a[i] - b[i]) / d;
                da[i] = da[i] + v;
                db[i] = db[i] - v;
            }
        }
        Distance::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == T::zero() || nb == T::zero() {
                return;
            }
            let cos = dot(a, b) / (na * nb);
            for i in 0..a.len() {
                let ga = -(b[i] / (na * nb) - cos * a[i] / (na * na));
                let gb = -(a[i] / (na * nb) - cos * b[i] / (nb * nb));
                da[i] = da[i] + scale * ga;
                db[i] = db[i] + scale * gb;
            }
        }
    }
}

/// Hardest positive and negative of one anchor, if both exist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardPair {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard mining with ties resolved to the lowest index.
pub fn mine_hard_pairs<T: Scalar>(x: &[T], d: usize, labels: &[usize], kind: Distance) -> Vec<HardPair> {
    let n = labels.len();
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut pairs = Vec::new();
    for a in 0..n {
        let mut pos: Option<(usize, T)> = None;
        let mut neg: Option<(usize, T)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dist = distance(kind, row(a), row(j));
            if labels[j] == labels[a] {
                if pos.map_or(true, |(_, best)| dist > best) {
                    pos = Some((j, dist));
                }
            } else if neg.map_or(true, |(_, best)| dist < best) {
                neg = Some((j, dist));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (pos, neg) {
            pairs.push(HardPair {
                anchor: a,
                positive: p,
                negative: q,
            });
        }
    }
    pairs
}

struct TripletOp {
    /// Triples whose hinge is active.
    active: Vec<HardPair>,
    valid: usize,
    dim: usize,
    kind: Distance,
}

impl<T: Scalar> Op<T> for TripletOp {
    fn name(&self) -> &'static str {
        "triplet_batch_hard"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let d = self.dim;
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            let scale = grad[0] / T::of(self.valid.max(1) as f64);
            for t in &self.active {
                for (other, sign) in [(t.positive, scale), (t.negative, -scale)] {
                    let a = &x[t.anchor * d..(t.anchor + 1) * d];
                    let b = &x[other * d..(other + 1) * d];
                    let mut da = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    distance_grad(self.kind, a, b, sign, &mut da, &mut db);
                    for i in 0..d {
                        dx[t.anchor * d + i] = dx[t.anchor * d + i] + da[i];
                        dx[other * d + i] = dx[other * d + i] + db[i];
                    }
                }
            }
            dx
        });
        vec![dx]
    }
}

/// Mean hinge `max(0, margin + d(a, p_hard) − d(a, n_hard))` over the anchors
/// that have at least one positive and one negative; 0 if none do.
pub fn triplet_batch_hard<T: Scalar>(g: &mut Graph<T>, embeddings: Var, labels: &[usize], cfg: &TripletConfig) -> Result<Var> {
    cfg.validate()?;
    let s = g.shape(embeddings);
    let (n, d) = (s.n, s.row_len());
    if n < 2 {
        return Err(Error::invalid(format!("triplet loss needs at least 2 samples, got {n}")));
    }
    if d == 0 {
        return Err(Error::shape("triplet_batch_hard", "zero-dimensional embeddings"));
    }
    if labels.len() != n {
        return Err(Error::shape("triplet_batch_hard", format!("{} labels for {n} rows", labels.len())));
    }
    let x = g.value(embeddings).data();
    let pairs = mine_hard_pairs(x, d, labels, cfg.distance);
    let margin = T::of(cfg.margin);
    let mut total = 0.0f64;
    let mut active = Vec::new();
    for t in &pairs {
        let a = &x[t.anchor * d..(t.anchor + 1) * d];
        let hinge = margin + distance(cfg.distance, a, &x[t.positive * d..(t.positive + 1) * d])
            - distance(cfg.distance, a, &x[t.negative * d..(t.negative + 1) * d]);
        if hinge > T::zero() {
            total += hinge.as_f64();
            active.push(*t);
        }
    }
    let loss = if pairs.is_empty() { 0.0 } else { total / pairs.len() as f64 };
    let op = TripletOp {
        active,
        valid: pairs.len(),
        dim: d,
        kind: cfg.distance,
    };
    g.record(op, &[embeddings], Tensor::scalar(T::of(loss)))
}

/// Unweighted sum of the two loss terms.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, cls: Var, tri: Var) -> Result<Var> {
    for v in [cls, tri] {
        if g.shape(v) != Shape::scalar() {
            return Err(Error::NotScalar { numel: g.shape(v).numel() });
        }
        if !g.item(v).is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
    }
    g.add(cls, tri)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::check;

    fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::matrix(rows, cols), |_| rng.gen_range(-2.0..2.0))
    }

    fn ce(x: &Tensor<f64>, labels: &[usize]) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = cross_entropy(&mut g, v, labels).unwrap();
        g.item(l)
    }

    fn tri(x: &Tensor<f64>, labels: &[usize], cfg: &TripletConfig) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = triplet_batch_hard(&mut g, v, labels, cfg).unwrap();
        g.item(l)
    }

    fn ce_oracle(x: &Tensor<f64>, labels: &[usize]) -> f64 {
        let k = x.shape().row_len();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &x.data()[i * k..(i + 1) * k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[y].exp() / z).ln();
        }
        total / labels.len() as f64
    }

    /// Enumerates every (anchor, positive, negative) and keeps the worst
    /// positive and closest negative per anchor.
    fn triplet_oracle(x: &Tensor<f64>, labels: &[usize], margin: f64) -> f64 {
        let d = x.shape().row_len();
        let dist = |i: usize, j: usize| -> f64 {
            (0..d).map(|k| (x.data()[i * d + k] - x.data()[j * d + k]).powi(2)).sum::<f64>().sqrt()
        };
        let n = labels.len();
        let mut sum = 0.0;
        let mut count = 0;
        for a in 0..n {
            let pos: Vec<f64> = (0..n).filter(|&p| p != a && labels[p] == labels[a]).map(|p| dist(a, p)).collect();
            let neg: Vec<f64> = (0..n).filter(|&q| labels[q] != labels[a]).map(|q| dist(a, q)).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let hp = pos.iter().cloned().fold(f64::MIN, f64::max);
            let hn = neg.iter().cloned().fold(f64::MAX, f64::min);
            sum += (margin + hp - hn).max(0.0);
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let x = Tensor::full(Shape::matrix(3, 4), 0.7);
        assert!((ce(&x, &[0, 1, 3]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero() {
        let x = Tensor::from_vec(Shape::matrix(1, 3), vec![100.0, 0.0, 0.0]).unwrap();
        assert!(ce(&x, &[0]) < 1e-40);
        let big = Tensor::from_vec(Shape::matrix(1, 2), vec![1000.0, -1000.0]).unwrap();
        assert!((ce(&big, &[1]) - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let x = matrix(5, 3, 1);
        let labels = [0, 2, 1, 1, 0];
        assert!((ce(&x, &labels) - ce_oracle(&x, &labels)).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let v = g.constant(matrix(2, 3, 1));
        assert!(cross_entropy(&mut g, v, &[0, 3]).is_err());
        assert!(cross_entropy(&mut g, v, &[0]).is_err());
    }

    #[test]
    fn separated_classes_satisfy_margin() {
        let x = Tensor::from_vec(Shape::matrix(4, 1), vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!(tri(&x, &[0, 0, 1, 1], &TripletConfig::default()), 0.0);
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let x = Tensor::full(Shape::matrix(4, 3), 1.5);
        let v = tri(&x, &[0, 0, 1, 1], &TripletConfig::default());
        assert!((v - 0.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_matches_brute_force() {
        let x = matrix(8, 4, 2);
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let got = tri(&x, &labels, &TripletConfig::default());
        assert!((got - triplet_oracle(&x, &labels, 0.3)).abs() < 1e-6);
    }

    #[test]
    fn anchors_without_positive_are_skipped() {
        let x = matrix(3, 2, 3);
        // only anchors 0 and 1 are valid
        let labels = [0, 0, 1];
        let got = tri(&x, &labels, &TripletConfig::default());
        assert!((got - triplet_oracle(&x, &labels, 0.3)).abs() < 1e-12);
        let mut g = Graph::new();
        let v = g.param(x);
        let l = triplet_batch_hard(&mut g, v, &[0, 1, 2], &TripletConfig::default()).unwrap();
        assert_eq!(g.item(l), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(v).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn triplet_errors() {
        let mut g = Graph::new();
        let one = g.constant(matrix(1, 2, 1));
        assert!(triplet_batch_hard(&mut g, one, &[0], &TripletConfig::default()).is_err());
        let empty = g.constant(Tensor::zeros(Shape::matrix(2, 0)));
        assert!(triplet_batch_hard(&mut g, empty, &[0, 1], &TripletConfig::default()).is_err());
        let x = g.constant(matrix(2, 2, 1));
        let cfg = TripletConfig {
            margin: -1.0,
            ..TripletConfig::default()
        };
        assert!(triplet_batch_hard(&mut g, x, &[0, 1], &cfg).is_err());
    }

    #[test]
    fn ties_pick_lowest_index() {
        // anchor 0: positives 1 and 2 equally far, negatives 3 and 4 equally near
        let x = Tensor::from_vec(Shape::matrix(5, 1), vec![0.0, 1.0, -1.0, 2.0, -2.0]).unwrap();
        let pairs = mine_hard_pairs(x.data(), 1, &[0, 0, 0, 1, 1], Distance::Euclidean);
        assert_eq!(pairs[0], HardPair { anchor: 0, positive: 1, negative: 3 });
    }

    #[test]
    fn total_loss_is_plain_sum() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0f64));
        let b = g.constant(Tensor::scalar(0.5));
        let t = total_loss(&mut g, a, b).unwrap();
        assert_eq!(g.item(t), 1.5);
        let z = g.constant(Tensor::scalar(0.0));
        let t = total_loss(&mut g, z, z).unwrap();
        assert_eq!(g.item(t), 0.0);
        let nan = g.constant(Tensor::scalar(f64::INFINITY));
        assert!(total_loss(&mut g, a, nan).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let labels = [0, 0, 1, 1, 2, 2];
        for distance in [Distance::Euclidean, Distance::Cosine] {
            let cfg = TripletConfig { margin: 0.3, distance };
            for seed in 0..3 {
                let inputs = [matrix(6, 4, 10 + seed), matrix(6, 3, 20 + seed)];
                let r = check(&inputs, &[0, 1], 1e-5, 1.0, 0, |g, v| {
                    let cls = cross_entropy(g, v[1], &labels)?;
                    let t = triplet_batch_hard(g, v[0], &labels, &cfg)?;
                    total_loss(g, cls, t)
                })
                .unwrap();
                assert!(r.max_rel_err < 1e-3, "{distance:?}: {r:?}");
            }
        }
    }

    #[test]
    fn total_loss_gradient_has_unit_coefficients() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(0.8f64));
        let b = g.param(Tensor::scalar(0.2));
        let t = total_loss(&mut g, a, b).unwrap();
        g.backward(t).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..10_000, perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle()) {
            let labels = [0usize, 0, 1, 1, 2, 2, 3, 3];
            let x = matrix(8, 4, seed);
            let logits = matrix(8, 4, seed + 1);
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let xp = x.select_rows(&perm).unwrap();
            let lp = logits.select_rows(&perm).unwrap();
            prop_assert!((ce(&logits, &labels) - ce(&lp, &pl)).abs() < 1e-9);
            let cfg = TripletConfig::default();
            prop_assert!((tri(&x, &labels, &cfg) - tri(&xp, &pl, &cfg)).abs() < 1e-9);
        }

        #[test]
        fn triplet_is_rotation_invariant(seed in 0u64..10_000, theta in 0.0f64..std::f64::consts::TAU) {
            let labels = [0usize, 0, 1, 1, 2, 2];
            let x = matrix(6, 3, seed);
            let (c, s) = (theta.cos(), theta.sin());
            // rotation in the (0, 2) plane
            let rot = Tensor::from_fn(x.shape(), |i| {
                let (r, k) = (i / 3, i % 3);
                let row = &x.data()[r * 3..r * 3 + 3];
                match k {
                    0 => c * row[0] - s * row[2],
                    2 => s * row[0] + c * row[2],
                    _ => row[1],
                }
            });
            let cfg = TripletConfig::default();
            prop_assert!((tri(&x, &labels, &cfg) - tri(&rot, &labels, &cfg)).abs() < 1e-5);
        }

        #[test]
        fn cross_entropy_is_shift_invariant(seed in 0u64..10_000, shifts in proptest::collection::vec(-50.0f64..50.0, 5)) {
            let x = matrix(5, 3, seed);
            let labels = [0usize, 2, 1, 1, 0];
            let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + shifts[i / 3]);
            prop_assert!((ce(&x, &labels) - ce(&shifted, &labels)).abs() < 1e-6);
        }
    }
}
