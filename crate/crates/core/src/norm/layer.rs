use serde::{Deserialize, Serialize};

use super::{dson, instance_norm, DomainBNState, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Binder, Graph, ParamId, ParamStore, Scalar, Shape, Tensor, Var};
use crate::Mode;

/// Normalization used by a backbone block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Batch norm shared by every domain.
    Bn,
    /// Instance norm on all channels.
    In,
    /// Instance norm on the first half, shared batch norm on the second.
    Ibn,
    /// Batch norm with per-domain affine and statistics.
    Dsbn,
    /// Instance norm on the first half, per-domain batch norm on the second.
    Dsan,
    /// Per-domain blend of batch and instance statistics.
    Dson,
}

impl NormKind {
    /// Whether the layer holds anything indexed by domain.
    pub fn is_domain_specific(self) -> bool {
        matches!(self, NormKind::Dsbn | NormKind::Dsan | NormKind::Dson)
    }

    pub fn splits_channels(self) -> bool {
        matches!(self, NormKind::Ibn | NormKind::Dsan)
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NormKind::Bn => "bn",
            NormKind::In => "in",
            NormKind::Ibn => "ibn",
            NormKind::Dsbn => "dsbn",
            NormKind::Dsan => "dsan",
            NormKind::Dson => "dson",
        };
        f.write_str(s)
    }
}

/// Knobs shared by all normalization layers of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormOptions {
    /// One IN affine for all domains (otherwise one per domain).
    pub share_in_affine: bool,
    /// Learnable affine on the IN half at all.
    pub enable_in_affine: bool,
    /// Fixed DSON blend weight; `None` makes it learnable (init 0.5).
    pub dson_weight: Option<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions {
            share_in_affine: true,
            enable_in_affine: true,
            dson_weight: None,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }
}

/// Learnable per-channel scale (init 1) and shift (init 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl AffineParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        AffineParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(Shape::vector(channels), T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(Shape::vector(channels))),
        }
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, binder: &mut Binder) -> (Var, Var) {
        (binder.bind(g, store, self.gamma), binder.bind(g, store, self.beta))
    }
}

fn pick<A>(items: &[A], domain: usize) -> Result<&A> {
    match items.len() {
        1 => Ok(&items[0]),
        n => items.get(domain).ok_or(Error::DomainOutOfRange { domain, num_domains: n }),
    }
}

/// Instance-normalization branch.
#[derive(Debug, Clone, PartialEq)]
pub struct InBranch {
    /// Empty when the affine is disabled, one entry when shared.
    affines: Vec<AffineParams>,
    channels: usize,
    eps: f64,
}

impl InBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        num_domains: usize,
        share: bool,
        enable: bool,
        eps: f64,
    ) -> Self {
        let affines = match (enable, share) {
            (false, _) => Vec::new(),
            (true, true) => vec![AffineParams::new(store, &format!("{name}.in"), channels)],
            (true, false) => (0..num_domains)
                .map(|d| AffineParams::new(store, &format!("{name}.in.d{d}"), channels))
                .collect(),
        };
        InBranch { affines, channels, eps }
    }

    pub fn affines(&self) -> &[AffineParams] {
        &self.affines
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        x: Var,
        domain: usize,
    ) -> Result<Var> {
        let affine = if self.affines.is_empty() {
            None
        } else {
            Some(pick(&self.affines, domain)?.bind(g, store, binder))
        };
        instance_norm(g, x, affine, self.eps)
    }
}

/// Batch-normalization branch, shared or per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBranch<T> {
    affines: Vec<AffineParams>,
    pub state: DomainBNState<T>,
    per_domain: bool,
}

impl<T: Scalar> BnBranch<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize, num_domains: usize, per_domain: bool, opts: &NormOptions) -> Result<Self> {
        let copies = if per_domain { num_domains } else { 1 };
        let affines = if per_domain {
            (0..copies)
                .map(|d| AffineParams::new(store, &format!("{name}.bn.d{d}"), channels))
                .collect()
        } else {
            vec![AffineParams::new(store, &format!("{name}.bn"), channels)]
        };
        Ok(BnBranch {
            affines,
            state: DomainBNState::new(copies, channels, opts.momentum, opts.eps)?,
            per_domain,
        })
    }

    pub fn is_per_domain(&self) -> bool {
        self.per_domain
    }

    pub fn affines(&self) -> &[AffineParams] {
        &self.affines
    }

    fn slot(&self, domain: usize) -> Result<usize> {
        if !self.per_domain {
            return Ok(0);
        }
        if domain >= self.affines.len() {
            return Err(Error::DomainOutOfRange {
                domain,
                num_domains: self.affines.len(),
            });
        }
        Ok(domain)
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        x: Var,
        domain: usize,
        mode: Mode,
    ) -> Result<Var> {
        let slot = self.slot(domain)?;
        let affine = self.affines[slot].bind(g, store, binder);
        super::batch_norm_domain(g, x, slot, affine, &mut self.state, mode)
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, store: &ParamStore<T>, binder: &mut Binder, x: Var, domain: usize) -> Result<Var> {
        let slot = self.slot(domain)?;
        let affine = self.affines[slot].bind(g, store, binder);
        super::batch_norm_eval(g, x, affine, self.state.domain(slot)?, self.state.eps)
    }
}

/// Channel-split layer: IN on `[0, C/2)`, BN on `[C/2, C)`.
///
/// With a per-domain BN branch this is DSAN; with a shared one it is the
/// IBN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DsanLayer<T> {
    channels: usize,
    pub in_branch: InBranch,
    pub bn_branch: BnBranch<T>,
}

impl<T: Scalar> DsanLayer<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        num_domains: usize,
        per_domain: bool,
        opts: &NormOptions,
    ) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::invalid(format!("channel-split normalization needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        // a shared BN branch makes the layer domain-agnostic, so its IN affine is too
        let share = opts.share_in_affine || !per_domain;
        Ok(DsanLayer {
            channels,
            in_branch: InBranch::new(store, name, half, num_domains, share, opts.enable_in_affine, opts.eps),
            bn_branch: BnBranch::new(store, name, half, num_domains, per_domain, opts)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn split(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let c = g.shape(x).c;
        if c != self.channels {
            return Err(Error::shape("dsan", format!("{c} channels for a {}-channel layer", self.channels)));
        }
        let half = c / 2;
        Ok((g.slice_channels(x, 0, half)?, g.slice_channels(x, half, c)?))
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        x: Var,
        domain: usize,
        mode: Mode,
    ) -> Result<Var> {
        let (lo, hi) = self.split(g, x)?;
        let a = self.in_branch.forward(g, store, binder, lo, domain)?;
        let b = self.bn_branch.forward(g, store, binder, hi, domain, mode)?;
        g.concat_channels(a, b)
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, store: &ParamStore<T>, binder: &mut Binder, x: Var, domain: usize) -> Result<Var> {
        let (lo, hi) = self.split(g, x)?;
        let a = self.in_branch.forward(g, store, binder, lo, domain)?;
        let b = self.bn_branch.forward_eval(g, store, binder, hi, domain)?;
        g.concat_channels(a, b)
    }
}

/// Blend weight of a DSON layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DsonWeight {
    Fixed(f64),
    /// Logit of the weight; the layer applies a sigmoid.
    Learnable(ParamId),
}

/// Per-domain blended batch/instance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DsonLayer<T> {
    pub weight: DsonWeight,
    affines: Vec<AffineParams>,
    pub state: DomainBNState<T>,
}

impl<T: Scalar> DsonLayer<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize, num_domains: usize, opts: &NormOptions) -> Result<Self> {
        let weight = match opts.dson_weight {
            Some(w) if (0.0..=1.0).contains(&w) => DsonWeight::Fixed(w),
            Some(w) => return Err(Error::invalid(format!("dson weight {w} outside [0, 1]"))),
            None => DsonWeight::Learnable(store.add(format!("{name}.dson.logit"), Tensor::scalar(T::zero()))),
        };
        Ok(DsonLayer {
            weight,
            affines: (0..num_domains)
                .map(|d| AffineParams::new(store, &format!("{name}.dson.d{d}"), channels))
                .collect(),
            state: DomainBNState::new(num_domains, channels, opts.momentum, opts.eps)?,
        })
    }

    pub fn affines(&self) -> &[AffineParams] {
        &self.affines
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        x: Var,
        domain: usize,
        mode: Mode,
    ) -> Result<Var> {
        let (weight, affine) = self.bind(g, store, binder, domain)?;
        let (eps, rule) = (self.state.eps, self.state.update_rule());
        dson(g, x, weight, affine, self.state.domain_mut(domain)?, mode, rule, eps)
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, store: &ParamStore<T>, binder: &mut Binder, x: Var, domain: usize) -> Result<Var> {
        let (weight, affine) = self.bind(g, store, binder, domain)?;
        // eval mode never writes to the statistics
        let mut stats = self.state.domain(domain)?.clone();
        dson(g, x, weight, affine, &mut stats, Mode::Eval, self.state.update_rule(), self.state.eps)
    }

    fn bind(&self, g: &mut Graph<T>, store: &ParamStore<T>, binder: &mut Binder, domain: usize) -> Result<(Var, (Var, Var))> {
        let affine = self
            .affines
            .get(domain)
            .ok_or(Error::DomainOutOfRange { domain, num_domains: self.affines.len() })?
            .bind(g, store, binder);
        let weight = match self.weight {
            DsonWeight::Fixed(w) => g.constant(Tensor::scalar(T::of(w))),
            DsonWeight::Learnable(id) => {
                let logit = binder.bind(g, store, id);
                g.sigmoid(logit)?
            }
        };
        Ok((weight, affine))
    }
}

/// A normalization layer of any [`NormKind`].
#[derive(Debug, Clone, PartialEq)]
pub enum NormLayer<T> {
    Batch(BnBranch<T>),
    Instance(InBranch),
    Split(DsanLayer<T>),
    Dson(DsonLayer<T>),
}

impl<T: Scalar> NormLayer<T> {
    pub fn new(kind: NormKind, store: &mut ParamStore<T>, name: &str, channels: usize, num_domains: usize, opts: &NormOptions) -> Result<Self> {
        if num_domains == 0 {
            return Err(Error::invalid("at least one domain is required"));
        }
        Ok(match kind {
            NormKind::Bn => NormLayer::Batch(BnBranch::new(store, name, channels, num_domains, false, opts)?),
            NormKind::Dsbn => NormLayer::Batch(BnBranch::new(store, name, channels, num_domains, true, opts)?),
            NormKind::In => NormLayer::Instance(InBranch::new(store, name, channels, num_domains, true, opts.enable_in_affine, opts.eps)),
            NormKind::Ibn => NormLayer::Split(DsanLayer::new(store, name, channels, num_domains, false, opts)?),
            NormKind::Dsan => NormLayer::Split(DsanLayer::new(store, name, channels, num_domains, true, opts)?),
            NormKind::Dson => NormLayer::Dson(DsonLayer::new(store, name, channels, num_domains, opts)?),
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binder: &mut Binder,
        x: Var,
        domain: usize,
        mode: Mode,
    ) -> Result<Var> {
        match self {
            NormLayer::Batch(l) => l.forward(g, store, binder, x, domain, mode),
            NormLayer::Instance(l) => l.forward(g, store, binder, x, domain),
            NormLayer::Split(l) => l.forward(g, store, binder, x, domain, mode),
            NormLayer::Dson(l) => l.forward(g, store, binder, x, domain, mode),
        }
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, store: &ParamStore<T>, binder: &mut Binder, x: Var, domain: usize) -> Result<Var> {
        match self {
            NormLayer::Batch(l) => l.forward_eval(g, store, binder, x, domain),
            NormLayer::Instance(l) => l.forward(g, store, binder, x, domain),
            NormLayer::Split(l) => l.forward_eval(g, store, binder, x, domain),
            NormLayer::Dson(l) => l.forward_eval(g, store, binder, x, domain),
        }
    }

    pub fn states(&self) -> Vec<&DomainBNState<T>> {
        match self {
            NormLayer::Batch(l) => vec![&l.state],
            NormLayer::Instance(_) => Vec::new(),
            NormLayer::Split(l) => vec![&l.bn_branch.state],
            NormLayer::Dson(l) => vec![&l.state],
        }
    }

    pub fn states_mut(&mut self) -> Vec<&mut DomainBNState<T>> {
        match self {
            NormLayer::Batch(l) => vec![&mut l.state],
            NormLayer::Instance(_) => Vec::new(),
            NormLayer::Split(l) => vec![&mut l.bn_branch.state],
            NormLayer::Dson(l) => vec![&mut l.state],
        }
    }
}
