//! Normalization layers: instance norm, per-domain batch norm, their
//! channel-split combination (DSAN), plain BN/IBN, and a blended-statistics
//! comparator (DSON).
//!
//! A DSAN layer over `C` channels routes channels `[0, C/2)` through
//! instance normalization with an affine shared by every domain, and
//! channels `[C/2, C)` through batch normalization whose affine and running
//! statistics belong to the domain of the current batch. The two halves are
//! concatenated back in that order.

mod layer;
mod ops;

pub use layer::{AffineParams, BnBranch, DsanLayer, DsonLayer, DsonWeight, InBranch, NormKind, NormLayer, NormOptions};
pub use ops::{batch_norm_eval, batch_norm_train, channel_stats, dson, instance_norm, plane_stats};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};
use crate::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Running statistics of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub batch_count: u64,
}

/// How a train-mode batch folds into the running statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StatUpdate {
    /// `r ← (1 − m)·r + m·batch`.
    Momentum(f64),
    /// Equal-weight average of every batch since the last reset.
    Cumulative,
}

impl<T: Scalar> DomainStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        DomainStats {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            batch_count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn update(&mut self, mean: &[T], var: &[T], update: StatUpdate) {
        let m = match update {
            StatUpdate::Momentum(m) => T::of(m),
            StatUpdate::Cumulative => T::one() / T::of((self.batch_count + 1) as f64),
        };
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = *r + m * (b - *r);
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (*r + m * (b - *r)).max(T::zero());
        }
        self.batch_count += 1;
    }
}

/// Per-domain running statistics for one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBNState<T> {
    domains: Vec<DomainStats<T>>,
    pub momentum: f64,
    pub eps: f64,
    /// Set while statistics are being re-estimated from scratch.
    pub cumulative: bool,
}

impl<T: Scalar> DomainBNState<T> {
    pub fn new(num_domains: usize, channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if num_domains == 0 {
            return Err(Error::invalid("normalization state needs at least one domain"));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::invalid(format!("momentum {momentum} outside (0, 1]")));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(DomainBNState {
            domains: (0..num_domains).map(|_| DomainStats::new(channels)).collect(),
            momentum,
            eps,
            cumulative: false,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn channels(&self) -> usize {
        self.domains[0].channels()
    }

    pub fn domain(&self, d: usize) -> Result<&DomainStats<T>> {
        let num_domains = self.domains.len();
        self.domains
            .get(d)
            .ok_or(Error::DomainOutOfRange { domain: d, num_domains })
    }

    pub fn domain_mut(&mut self, d: usize) -> Result<&mut DomainStats<T>> {
        let num_domains = self.domains.len();
        self.domains
            .get_mut(d)
            .ok_or(Error::DomainOutOfRange { domain: d, num_domains })
    }

    pub fn domains(&self) -> &[DomainStats<T>] {
        &self.domains
    }

    pub fn replace_domains(&mut self, domains: Vec<DomainStats<T>>) -> Result<()> {
        if domains.len() != self.domains.len() || domains.iter().any(|d| d.channels() != self.channels()) {
            return Err(Error::invalid("replacement statistics do not match the layer"));
        }
        self.domains = domains;
        Ok(())
    }

    pub fn update_rule(&self) -> StatUpdate {
        if self.cumulative {
            StatUpdate::Cumulative
        } else {
            StatUpdate::Momentum(self.momentum)
        }
    }

    /// Number of buffered scalars (running mean and variance).
    pub fn num_buffers(&self) -> usize {
        self.domains.len() * 2 * self.channels()
    }
}

/// Batch normalization against the statistics of `domain`.
///
/// Train mode normalizes with the mini-batch statistics and folds them into
/// that domain's running statistics only; eval mode reads them.
pub fn batch_norm_domain<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    domain: usize,
    affine: (Var, Var),
    state: &mut DomainBNState<T>,
    mode: Mode,
) -> Result<Var> {
    let (eps, rule) = (state.eps, state.update_rule());
    match mode {
        Mode::Train => batch_norm_train(g, x, affine, state.domain_mut(domain)?, rule, eps),
        Mode::Eval => batch_norm_eval(g, x, affine, state.domain(domain)?, eps),
    }
}

#[cfg(test)]
mod tests;
