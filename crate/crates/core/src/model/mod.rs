//! Small plain CNN backbone with selectable per-block normalization,
//! per-domain classifier heads, and checkpoint I/O.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::norm::{DomainBNState, NormKind, NormLayer, NormOptions};
use crate::rng;
use crate::tensor::{conv_output_size, Binder, Graph, ParamId, ParamStore, Scalar, Shape, Tensor, Var};
use crate::Mode;

/// Rows per chunk when embedding a large set in eval mode.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub stride: usize,
    pub norm: NormKind,
}

impl BlockConfig {
    /// Kernel and padding: 3/1 keeps the size, 4/1 halves it exactly.
    pub fn kernel_and_pad(&self) -> (usize, usize) {
        if self.stride == 2 {
            (4, 1)
        } else {
            (3, 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: Vec<BlockConfig>,
    pub input_channels: usize,
    /// Input height and width.
    pub input_size: (usize, usize),
    pub embedding_dim: usize,
    pub num_domains: usize,
    /// Blocks listed here use DSAN whatever their own `norm` says.
    pub dsan_positions: Option<Vec<usize>>,
    /// Batch norm on the pooled embedding (per domain when any block is).
    pub neck: bool,
    pub norm_options: NormOptions,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::uniform(&[32, 64, 128, 256], NormKind::Dsan, 2)
    }
}

impl ModelConfig {
    /// Blocks of the given widths, all with `norm`; the first keeps the input
    /// resolution and every later block halves it.
    pub fn uniform(channels: &[usize], norm: NormKind, num_domains: usize) -> Self {
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| BlockConfig {
                out_channels: c,
                stride: if i == 0 { 1 } else { 2 },
                norm,
            })
            .collect();
        ModelConfig {
            blocks,
            input_channels: 3,
            input_size: (32, 16),
            embedding_dim: channels.last().copied().unwrap_or(0),
            num_domains,
            dsan_positions: None,
            neck: true,
            norm_options: NormOptions::default(),
            seed: 0,
        }
    }

    /// Norm kind of block `i` after applying `dsan_positions`.
    pub fn block_norm(&self, i: usize) -> NormKind {
        match &self.dsan_positions {
            Some(pos) if pos.contains(&i) => NormKind::Dsan,
            _ => self.blocks[i].norm,
        }
    }

    pub fn is_domain_specific(&self) -> bool {
        (0..self.blocks.len()).any(|i| self.block_norm(i).is_domain_specific())
    }

    pub fn neck_kind(&self) -> NormKind {
        if self.is_domain_specific() {
            NormKind::Dsbn
        } else {
            NormKind::Bn
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.input_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("model.blocks", "at least one block is required"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("model.input_channels", "must be positive"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim", "must be positive"));
        }
        if self.num_domains == 0 {
            return Err(Error::config("model.num_domains", "must be at least 1"));
        }
        if let Some(pos) = &self.dsan_positions {
            if let Some(&bad) = pos.iter().find(|&&p| p >= self.blocks.len()) {
                return Err(Error::config("model.dsan_positions", format!("block {bad} does not exist")));
            }
        }
        let (mut h, mut w) = self.input_size;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.out_channels % 2 != 0 {
                return Err(Error::config(format!("model.blocks[{i}].out_channels"), "must be even and positive"));
            }
            if !matches!(b.stride, 1 | 2) {
                return Err(Error::config(format!("model.blocks[{i}].stride"), "must be 1 or 2"));
            }
            let (k, p) = b.kernel_and_pad();
            let bad = |e: Error| Error::config(format!("model.blocks[{i}]"), e.to_string());
            h = conv_output_size(h, k, b.stride, p).map_err(bad)?;
            w = conv_output_size(w, k, b.stride, p).map_err(bad)?;
        }
        if self.norm_options.eps <= 0.0 || !(self.norm_options.momentum > 0.0 && self.norm_options.momentum <= 1.0) {
            return Err(Error::config("model.norm_options", "eps must be positive and momentum in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    weight: ParamId,
    stride: usize,
    pad: usize,
    norm: NormLayer<T>,
}

/// The embedding network: conv → norm → ReLU blocks, global average
/// pooling, an optional linear projection and an optional BN neck.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    blocks: Vec<Block<T>>,
    projection: Option<(ParamId, ParamId)>,
    neck: Option<NormLayer<T>>,
}

fn kaiming_uniform<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, &[rng::tag::INIT]);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut c_in = config.input_channels;
        let opts = config.norm_options;
        for (i, b) in config.blocks.iter().enumerate() {
            let (k, pad) = b.kernel_and_pad();
            let shape = Shape::new(b.out_channels, c_in, k, k);
            let weight = params.add(format!("block{i}.conv"), kaiming_uniform(shape, c_in * k * k, &mut rng));
            let norm = NormLayer::new(config.block_norm(i), &mut params, &format!("block{i}"), b.out_channels, config.num_domains, &opts)?;
            blocks.push(Block {
                weight,
                stride: b.stride,
                pad,
                norm,
            });
            c_in = b.out_channels;
        }
        let projection = (config.embedding_dim != c_in).then(|| {
            let bound = 1.0 / (c_in as f64).sqrt();
            let w = Tensor::from_fn(Shape::new(config.embedding_dim, c_in, 1, 1), |_| T::of(rng.gen_range(-bound..bound)));
            (
                params.add("proj.weight", w),
                params.add("proj.bias", Tensor::zeros(Shape::vector(config.embedding_dim))),
            )
        });
        let neck = if config.neck {
            Some(NormLayer::new(config.neck_kind(), &mut params, "neck", config.embedding_dim, config.num_domains, &opts)?)
        } else {
            None
        };
        Ok(Backbone {
            config,
            params,
            blocks,
            projection,
            neck,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Running-statistic scalars (means and variances).
    pub fn num_buffers(&self) -> usize {
        self.norm_states().iter().map(|s| s.num_buffers()).sum()
    }

    /// SHA-256 over every parameter and running statistic, in order.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            t.data().iter().for_each(|v| h.update(v.as_f64().to_le_bytes()));
        }
        for s in self.norm_states() {
            for d in s.domains() {
                d.running_mean.iter().chain(&d.running_var).for_each(|v| h.update(v.as_f64().to_le_bytes()));
                h.update(d.batch_count.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer<T>> {
        self.blocks.iter().map(|b| &b.norm).chain(self.neck.iter())
    }

    pub fn norm_states(&self) -> Vec<&DomainBNState<T>> {
        self.norm_layers().flat_map(|l| l.states()).collect()
    }

    pub fn norm_states_mut(&mut self) -> Vec<&mut DomainBNState<T>> {
        self.blocks
            .iter_mut()
            .map(|b| &mut b.norm)
            .chain(self.neck.iter_mut())
            .flat_map(|l| l.states_mut())
            .collect()
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let c = &self.config;
        if shape.c != c.input_channels || (shape.h, shape.w) != c.input_size {
            return Err(Error::shape(
                "backbone",
                format!("input {shape} for a model expecting {}x{}x{}", c.input_channels, c.input_size.0, c.input_size.1),
            ));
        }
        if shape.n == 0 {
            return Err(Error::shape("backbone", "empty batch"));
        }
        Ok(())
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.config.num_domains {
            return Err(Error::DomainOutOfRange {
                domain,
                num_domains: self.config.num_domains,
            });
        }
        Ok(())
    }

    fn head(&self, g: &mut Graph<T>, binder: &mut Binder, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        match self.projection {
            Some((w, b)) => {
                let (w, b) = (binder.bind(g, &self.params, w), binder.bind(g, &self.params, b));
                g.linear(pooled, w, b)
            }
            None => Ok(pooled),
        }
    }

    /// Embeds `x` through the path of `domain`; train mode updates that
    /// domain's running statistics. Returns an `(n, embedding_dim, 1, 1)` node.
    pub fn forward(&mut self, g: &mut Graph<T>, binder: &mut Binder, x: Var, domain: usize, mode: Mode) -> Result<Var> {
        if mode == Mode::Eval {
            return self.forward_eval(g, binder, x, domain);
        }
        self.check_input(g.shape(x))?;
        self.check_domain(domain)?;
        let mut h = x;
        for i in 0..self.blocks.len() {
            let Block { weight, stride, pad, .. } = self.blocks[i];
            let w = binder.bind(g, &self.params, weight);
            let y = g.conv2d(h, w, None, stride, pad)?;
            let y = self.blocks[i].norm.forward(g, &self.params, binder, y, domain, mode)?;
            h = g.relu(y)?;
        }
        let e = self.head(g, binder, h)?;
        match self.neck.as_mut() {
            Some(neck) => neck.forward(g, &self.params, binder, e, domain, mode),
            None => Ok(e),
        }
    }

    /// Read-only eval-mode forward.
    pub fn forward_eval(&self, g: &mut Graph<T>, binder: &mut Binder, x: Var, domain: usize) -> Result<Var> {
        self.check_input(g.shape(x))?;
        self.check_domain(domain)?;
        let mut h = x;
        for b in &self.blocks {
            let w = binder.bind(g, &self.params, b.weight);
            let y = g.conv2d(h, w, None, b.stride, b.pad)?;
            let y = b.norm.forward_eval(g, &self.params, binder, y, domain)?;
            h = g.relu(y)?;
        }
        let e = self.head(g, binder, h)?;
        match &self.neck {
            Some(neck) => neck.forward_eval(g, &self.params, binder, e, domain),
            None => Ok(e),
        }
    }

    /// Eval-mode embeddings `(n, embedding_dim)` of `images` via one path.
    pub fn embed(&self, images: &Tensor<T>, domain: usize) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let n = images.shape().n;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = images.select_rows(&idx)?;
            let mut g = Graph::new();
            let mut binder = Binder::frozen(self.params.len());
            let x = g.constant(chunk);
            let y = self.forward_eval(&mut g, &mut binder, x, domain)?;
            parts.push(g.value(y).clone());
            start = end;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::stack_rows(&refs)?.reshape(Shape::matrix(n, self.config.embedding_dim))
    }

    /// Mean of the eval-mode embeddings over every domain path.
    pub fn forward_fused(&self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode != Mode::Eval {
            return Err(Error::invalid("fused embeddings are only defined in eval mode"));
        }
        let d = self.config.num_domains;
        let mut acc = self.embed(images, 0)?;
        for domain in 1..d {
            let e = self.embed(images, domain)?;
            acc.data_mut().iter_mut().zip(e.data()).for_each(|(a, &b)| *a = *a + b);
        }
        if d > 1 {
            let inv = T::one() / T::of(d as f64);
            acc.data_mut().iter_mut().for_each(|a| *a = *a * inv);
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

/// Per-domain linear heads over that domain's pseudo-label space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank<T> {
    pub params: ParamStore<T>,
    heads: Vec<Option<Head>>,
    embedding_dim: usize,
}

impl<T: Scalar> ClassifierBank<T> {
    /// Fresh heads, one per domain with at least one class.
    pub fn new(embedding_dim: usize, classes: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let bound = 1.0 / (embedding_dim.max(1) as f64).sqrt();
        let heads = classes
            .iter()
            .enumerate()
            .map(|(d, &k)| {
                (k > 0).then(|| Head {
                    weight: params.add(
                        format!("head{d}.weight"),
                        Tensor::from_fn(Shape::new(k, embedding_dim, 1, 1), |_| T::of(rng.gen_range(-bound..bound))),
                    ),
                    bias: params.add(format!("head{d}.bias"), Tensor::zeros(Shape::vector(k))),
                    classes: k,
                })
            })
            .collect();
        ClassifierBank {
            params,
            heads,
            embedding_dim,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.heads.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn head(&self, domain: usize) -> Option<&Head> {
        self.heads.get(domain).and_then(Option::as_ref)
    }

    /// Class count per domain (0 where no head exists).
    pub fn classes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.map_or(0, |h| h.classes)).collect()
    }

    /// Logits `(n, classes)` of domain `domain`'s head.
    pub fn classify(&self, g: &mut Graph<T>, binder: &mut Binder, embeddings: Var, domain: usize) -> Result<Var> {
        let head = self
            .head(domain)
            .ok_or_else(|| Error::invalid(format!("no classifier head for domain {domain}")))?;
        if g.shape(embeddings).row_len() != self.embedding_dim {
            return Err(Error::shape("classify", format!("embedding {} vs head input {}", g.shape(embeddings), self.embedding_dim)));
        }
        let w = binder.bind(g, &self.params, head.weight);
        let b = binder.bind(g, &self.params, head.bias);
        g.linear(embeddings, w, b)
    }
}
