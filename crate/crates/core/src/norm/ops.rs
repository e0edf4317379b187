use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Scalar, Shape, Tensor, Var};

use super::DomainStats;

/// Per-(sample, channel) plane mean and biased variance.
pub fn plane_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let hw = x.shape().plane();
    let m = T::of(hw as f64);
    let mut means = Vec::with_capacity(x.shape().n * x.shape().c);
    let mut vars = Vec::with_capacity(means.capacity());
    for plane in x.data().chunks(hw) {
        let mean = plane.iter().copied().sum::<T>() / m;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

/// Per-channel mean and biased variance over (n, h, w).
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let hw = s.plane();
    let count = T::of((s.n * hw) as f64);
    let data = x.data();
    let mut means = vec![T::zero(); s.c];
    let mut vars = vec![T::zero(); s.c];
    for c in 0..s.c {
        let planes = || (0..s.n).map(move |n| &data[(n * s.c + c) * hw..(n * s.c + c + 1) * hw]);
        let mean = planes().flat_map(|p| p.iter().copied()).sum::<T>() / count;
        let var = planes()
            .flat_map(|p| p.iter().map(move |&v| (v - mean) * (v - mean)))
            .sum::<T>()
            / count;
        means[c] = mean;
        vars[c] = var;
    }
    (means, vars)
}

fn check_affine<T: Scalar>(g: &Graph<T>, op: &'static str, channels: usize, affine: (Var, Var)) -> Result<()> {
    for v in [affine.0, affine.1] {
        if g.shape(v).numel() != channels {
            return Err(Error::shape(op, format!("affine of {} for {channels} channels", g.shape(v).numel())));
        }
    }
    Ok(())
}

fn affine_values<T: Scalar>(g: &Graph<T>, affine: Option<(Var, Var)>, channels: usize) -> (Vec<T>, Vec<T>) {
    match affine {
        Some((gamma, beta)) => (g.value(gamma).data().to_vec(), g.value(beta).data().to_vec()),
        None => (vec![T::one(); channels], vec![T::zero(); channels]),
    }
}

/// Accumulates `dgamma[c] += Σ g·xhat`, `dbeta[c] += Σ g` over one plane.
fn affine_grads<T: Scalar>(grad: &[T], xhat: &[T], shape: Shape) -> (Vec<T>, Vec<T>) {
    let hw = shape.plane();
    let mut dgamma = vec![T::zero(); shape.c];
    let mut dbeta = vec![T::zero(); shape.c];
    for (i, (g, xh)) in grad.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let c = i % shape.c;
        dgamma[c] = dgamma[c] + g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        dbeta[c] = dbeta[c] + g.iter().copied().sum::<T>();
    }
    (dgamma, dbeta)
}

struct InstanceNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    affine: bool,
}

impl<T: Scalar> Op<T> for InstanceNormOp<T> {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let hw = s.plane();
        let m = T::of(hw as f64);
        let gamma = |c: usize| if self.affine { inputs[1].data()[c] } else { T::one() };
        let dx = needs[0].then(|| {
            let mut dx = Vec::with_capacity(s.numel());
            for (p, (g, xh)) in grad.chunks(hw).zip(self.xhat.chunks(hw)).enumerate() {
                let gm = gamma(p % s.c);
                let sum_g = g.iter().copied().sum::<T>() * gm;
                let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * gm;
                let k = self.inv_std[p] / m;
                dx.extend(g.iter().zip(xh).map(|(&gi, &xi)| k * (m * gi * gm - sum_g - xi * sum_gx)));
            }
            dx
        });
        let mut out = vec![dx];
        if self.affine {
            let (dgamma, dbeta) = affine_grads(grad, &self.xhat, s);
            out.push(needs[1].then_some(dgamma));
            out.push(needs[2].then_some(dbeta));
        }
        out
    }
}

/// Instance normalization: every (sample, channel) plane is standardized
/// with its own mean and biased variance, then scaled and shifted.
pub fn instance_norm<T: Scalar>(g: &mut Graph<T>, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
    let s = g.shape(x);
    if s.plane() == 0 || s.n == 0 || s.c == 0 {
        return Err(Error::shape("instance_norm", format!("empty spatial plane {s}")));
    }
    if let Some(a) = affine {
        check_affine(g, "instance_norm", s.c, a)?;
    }
    let (gamma, beta) = affine_values(g, affine, s.c);
    let input = g.value(x);
    let (means, vars) = plane_stats(input);
    let eps = T::of(eps);
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let hw = s.plane();
    let mut xhat = Vec::with_capacity(s.numel());
    let mut out = Vec::with_capacity(s.numel());
    for (p, plane) in input.data().chunks(hw).enumerate() {
        let c = p % s.c;
        for &v in plane {
            let xh = (v - means[p]) * inv_std[p];
            xhat.push(xh);
            out.push(gamma[c] * xh + beta[c]);
        }
    }
    let output = Tensor::from_vec(s, out)?;
    let op = InstanceNormOp {
        xhat,
        inv_std,
        affine: affine.is_some(),
    };
    match affine {
        Some((gm, bt)) => g.record(op, &[x, gm, bt], output),
        None => g.record(op, &[x], output),
    }
}

struct BatchNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Statistics came from the batch itself (train mode).
    batch_stats: bool,
}

impl<T: Scalar> Op<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        if self.batch_stats {
            "batch_norm_train"
        } else {
            "batch_norm_eval"
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let hw = s.plane();
        let gamma = inputs[1].data();
        let (dgamma, dbeta) = affine_grads(grad, &self.xhat, s);
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); s.numel()];
            let m = T::of((s.n * hw) as f64);
            for (p, (g, xh)) in grad.chunks(hw).zip(self.xhat.chunks(hw)).enumerate() {
                let c = p % s.c;
                let dst = &mut dx[p * hw..(p + 1) * hw];
                if self.batch_stats {
                    let k = gamma[c] * self.inv_std[c] / m;
                    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(xh) {
                        *d = k * (m * gi - dbeta[c] - xi * dgamma[c]);
                    }
                } else {
                    let k = gamma[c] * self.inv_std[c];
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d = k * gi);
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

fn batch_norm_with<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    affine: (Var, Var),
    means: &[T],
    vars: &[T],
    eps: f64,
    batch_stats: bool,
) -> Result<Var> {
    let s = g.shape(x);
    let (gamma, beta) = affine_values(g, Some(affine), s.c);
    let eps = T::of(eps);
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let hw = s.plane();
    let mut xhat = Vec::with_capacity(s.numel());
    let mut out = Vec::with_capacity(s.numel());
    for (p, plane) in g.value(x).data().chunks(hw).enumerate() {
        let c = p % s.c;
        for &v in plane {
            let xh = (v - means[c]) * inv_std[c];
            xhat.push(xh);
            out.push(gamma[c] * xh + beta[c]);
        }
    }
    let output = Tensor::from_vec(s, out)?;
    let op = BatchNormOp {
        xhat,
        inv_std,
        batch_stats,
    };
    g.record(op, &[x, affine.0, affine.1], output)
}

fn check_bn_input<T: Scalar>(g: &Graph<T>, op: &'static str, x: Var, affine: (Var, Var), stats: &DomainStats<T>) -> Result<Shape> {
    let s = g.shape(x);
    s.require_nonempty(op)?;
    check_affine(g, op, s.c, affine)?;
    if stats.running_mean.len() != s.c {
        return Err(Error::shape(op, format!("state of {} channels for input {s}", stats.running_mean.len())));
    }
    Ok(s)
}

/// Train-mode batch normalization with the mini-batch statistics; the
/// running statistics in `stats` are updated afterwards.
pub fn batch_norm_train<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    affine: (Var, Var),
    stats: &mut DomainStats<T>,
    update: super::StatUpdate,
    eps: f64,
) -> Result<Var> {
    let s = check_bn_input(g, "batch_norm_train", x, affine, stats)?;
    if s.n * s.plane() < 2 {
        return Err(Error::invalid(format!(
            "batch_norm_train needs at least 2 values per channel, got {}",
            s.n * s.plane()
        )));
    }
    let (means, vars) = channel_stats(g.value(x));
    let y = batch_norm_with(g, x, affine, &means, &vars, eps, true)?;
    stats.update(&means, &vars, update);
    Ok(y)
}

/// Eval-mode batch normalization with frozen running statistics.
pub fn batch_norm_eval<T: Scalar>(g: &mut Graph<T>, x: Var, affine: (Var, Var), stats: &DomainStats<T>, eps: f64) -> Result<Var> {
    check_bn_input(g, "batch_norm_eval", x, affine, stats)?;
    batch_norm_with(g, x, affine, &stats.running_mean, &stats.running_var, eps, false)
}

struct DsonOp<T> {
    weight: T,
    batch_stats: bool,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    inst_mean: Vec<T>,
    inst_var: Vec<T>,
    mix_mean: Vec<T>,
    inv_std: Vec<T>,
    xhat: Vec<T>,
}

impl<T: Scalar> Op<T> for DsonOp<T> {
    fn name(&self) -> &'static str {
        "dson"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0];
        let s = x.shape();
        let hw = s.plane();
        let gamma = inputs[2].data();
        let w = self.weight;
        let two = T::of(2.0);
        let half = T::of(0.5);

        // Gradients w.r.t. the blended per-plane mean and variance.
        let mut d_mu = vec![T::zero(); s.n * s.c];
        let mut d_var = vec![T::zero(); s.n * s.c];
        for (p, (g, xp)) in grad.chunks(hw).zip(x.data().chunks(hw)).enumerate() {
            let gm = gamma[p % s.c];
            let inv = self.inv_std[p];
            let mu = self.mix_mean[p];
            let sum_g: T = g.iter().copied().sum::<T>() * gm;
            let sum_gc: T = g.iter().zip(xp).map(|(&gi, &xi)| gi * (xi - mu)).sum::<T>() * gm;
            d_mu[p] = -sum_g * inv;
            d_var[p] = -half * sum_gc * inv * inv * inv;
        }

        let mut d_weight = T::zero();
        let mut d_bmean = vec![T::zero(); s.c];
        let mut d_bvar = vec![T::zero(); s.c];
        for p in 0..s.n * s.c {
            let c = p % s.c;
            d_weight = d_weight
                + d_mu[p] * (self.batch_mean[c] - self.inst_mean[p])
                + d_var[p] * (self.batch_var[c] - self.inst_var[p]);
            d_bmean[c] = d_bmean[c] + w * d_mu[p];
            d_bvar[c] = d_bvar[c] + w * d_var[p];
        }

        let dx = needs[0].then(|| {
            let mb = T::of((s.n * hw) as f64);
            let mi = T::of(hw as f64);
            let mut dx = Vec::with_capacity(s.numel());
            for (p, (g, xp)) in grad.chunks(hw).zip(x.data().chunks(hw)).enumerate() {
                let c = p % s.c;
                let gm = gamma[c];
                let inv = self.inv_std[p];
                let di_mu = (T::one() - w) * d_mu[p];
                let di_var = (T::one() - w) * d_var[p];
                for (&gi, &xi) in g.iter().zip(xp) {
                    let mut d = gi * gm * inv + di_mu / mi + di_var * two * (xi - self.inst_mean[p]) / mi;
                    if self.batch_stats {
                        d = d + d_bmean[c] / mb + d_bvar[c] * two * (xi - self.batch_mean[c]) / mb;
                    }
                    dx.push(d);
                }
            }
            dx
        });
        let (dgamma, dbeta) = affine_grads(grad, &self.xhat, s);
        vec![
            dx,
            needs[1].then(|| vec![d_weight]),
            needs[2].then_some(dgamma),
            needs[3].then_some(dbeta),
        ]
    }
}

/// Blend of batch and instance statistics:
/// `μ = w·μ_batch + (1−w)·μ_plane`, `σ² = w·σ²_batch + (1−w)·σ²_plane`.
///
/// In train mode the batch statistics come from `x` and the running
/// statistics are updated; in eval mode the running statistics stand in.
/// `weight` is a one-element tensor holding `w ∈ [0, 1]`.
pub fn dson<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    affine: (Var, Var),
    stats: &mut DomainStats<T>,
    mode: crate::Mode,
    update: super::StatUpdate,
    eps: f64,
) -> Result<Var> {
    let s = check_bn_input(g, "dson", x, affine, stats)?;
    if g.shape(weight).numel() != 1 {
        return Err(Error::shape("dson", "mix weight must be a single value"));
    }
    let w = g.item(weight);
    if !(w >= T::zero() && w <= T::one()) {
        return Err(Error::invalid(format!("dson mix weight {w} outside [0, 1]")));
    }
    let train = mode == crate::Mode::Train;
    if train && s.n * s.plane() < 2 {
        return Err(Error::invalid("dson train mode needs at least 2 values per channel"));
    }
    if s.plane() == 0 {
        return Err(Error::shape("dson", "empty spatial plane"));
    }
    let input = g.value(x);
    let (batch_mean, batch_var) = if train {
        channel_stats(input)
    } else {
        (stats.running_mean.clone(), stats.running_var.clone())
    };
    let (inst_mean, inst_var) = plane_stats(input);
    let (gamma, beta) = affine_values(g, Some(affine), s.c);
    let epsv = T::of(eps);
    let hw = s.plane();
    let mut mix_mean = Vec::with_capacity(s.n * s.c);
    let mut inv_std = Vec::with_capacity(s.n * s.c);
    for p in 0..s.n * s.c {
        let c = p % s.c;
        mix_mean.push(w * batch_mean[c] + (T::one() - w) * inst_mean[p]);
        let var = w * batch_var[c] + (T::one() - w) * inst_var[p];
        inv_std.push(T::one() / (var + epsv).sqrt());
    }
    let mut xhat = Vec::with_capacity(s.numel());
    let mut out = Vec::with_capacity(s.numel());
    for (p, plane) in input.data().chunks(hw).enumerate() {
        let c = p % s.c;
        for &v in plane {
            let xh = (v - mix_mean[p]) * inv_std[p];
            xhat.push(xh);
            out.push(gamma[c] * xh + beta[c]);
        }
    }
    let output = Tensor::from_vec(s, out)?;
    let op = DsonOp {
        weight: w,
        batch_stats: train,
        batch_mean,
        batch_var,
        inst_mean,
        inst_var,
        mix_mean,
        inv_std,
        xhat,
    };
    let (bm, bv) = (op.batch_mean.clone(), op.batch_var.clone());
    let y = g.record(op, &[x, weight, affine.0, affine.1], output)?;
    if train {
        stats.update(&bm, &bv, update);
    }
    Ok(y)
}
