//! The alternating cluster/train loop over several source domains, plus the
//! supervised and source-evaluated run modes.
//!
//! Each epoch extracts eval-mode embeddings of every source train split,
//! clusters them per domain with DBSCAN, rebuilds the per-domain
//! classification heads to match, and trains round-robin over the domains
//! on P×K batches drawn from the clustered (non-noise) samples.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{adjusted_mutual_info, dbscan, fowlkes_mallows, ClusterAssignment, DbscanConfig, NOISE};
use crate::data::{augment, sample_pk_batch, AugmentConfig, BatchSpec, DomainSet, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, l2_normalize, EvalReport, FeaturePath, PathSelection};
use crate::loss::{cross_entropy, total_loss, triplet_batch_hard, TripletConfig};
use crate::model::{load_checkpoint, save_checkpoint, Backbone, Checkpoint, ClassifierBank, ModelConfig};
use crate::rng::{self, tag};
use crate::tensor::{Adam, AdamConfig, Binder, Graph, Tensor};
use crate::Mode;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    /// Pseudo-labels from clustering, evaluation on unseen domains.
    #[serde(rename = "unDG")]
    UnDg,
    /// True identity labels, fixed heads.
    #[serde(rename = "supervisedDG")]
    SupervisedDg,
    /// Pseudo-labels with random erasing, evaluation on the sources.
    #[serde(rename = "UDAwoSL")]
    UdaWoSl,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::UnDg => "unDG",
            RunMode::SupervisedDg => "supervisedDG",
            RunMode::UdaWoSl => "UDAwoSL",
        })
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unDG" => Ok(RunMode::UnDg),
            "supervisedDG" => Ok(RunMode::SupervisedDg),
            "UDAwoSL" => Ok(RunMode::UdaWoSl),
            other => Err(Error::config("mode", format!("expected unDG, supervisedDG or UDAwoSL, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Iterations per domain per epoch; `None` means
    /// `ceil(largest train split / batch size)`.
    pub iters_per_domain: Option<usize>,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch: BatchSpec,
    pub dbscan: DbscanConfig,
    /// Per-domain overrides of `dbscan`.
    pub dbscan_per_domain: Option<Vec<DbscanConfig>>,
    pub triplet: TripletConfig,
    pub augment: AugmentConfig,
    pub mode: RunMode,
    /// `num_domains` and `seed` are taken from the run.
    pub model: ModelConfig,
    /// Average batch statistics over every source train sample before the
    /// first clustering, so the initial running statistics fit the data.
    pub warmup_running_stats: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            iters_per_domain: None,
            learning_rate: 3.5e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch: BatchSpec::default(),
            dbscan: DbscanConfig::default(),
            dbscan_per_domain: None,
            triplet: TripletConfig::default(),
            augment: AugmentConfig::default(),
            mode: RunMode::UnDg,
            model: ModelConfig::default(),
            warmup_running_stats: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("unknown field") || msg.contains("missing field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, msg)
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.iters_per_domain == Some(0) {
            return Err(Error::config("iters_per_domain", "must be at least 1"));
        }
        self.adam().validate()?;
        self.batch.validate()?;
        self.dbscan.validate()?;
        for c in self.dbscan_per_domain.iter().flatten() {
            c.validate()?;
        }
        self.triplet.validate()?;
        if !(0.0..=1.0).contains(&self.augment.flip_probability) {
            return Err(Error::config("augment.flip_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn dbscan_for(&self, domain: usize) -> DbscanConfig {
        self.dbscan_per_domain
            .as_ref()
            .and_then(|v| v.get(domain).copied())
            .unwrap_or(self.dbscan)
    }

    fn augment_config(&self) -> AugmentConfig {
        let mut a = self.augment;
        if self.mode == RunMode::UdaWoSl {
            a.random_erasing = true;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEpochLog {
    pub domain: usize,
    pub num_clusters: usize,
    pub num_noise: usize,
    /// Against the train identities, when known.
    pub ami: Option<f64>,
    pub fmi: Option<f64>,
    pub iterations: usize,
    /// Fewer than two usable labels; no training this epoch.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub domains: Vec<DomainEpochLog>,
    pub cls_loss: f64,
    pub tri_loss: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

/// One optimisation step's batch, for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub domain: usize,
    /// Indices into the domain's train split.
    pub samples: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Result of [`Trainer::train_epoch`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTraining {
    pub cls_loss: f64,
    pub tri_loss: f64,
    pub steps: usize,
    pub iterations: Vec<usize>,
    pub skipped: Vec<bool>,
    pub batches: Vec<BatchRecord>,
}

/// Per-domain clustering of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Relabel {
    pub assignments: Vec<ClusterAssignment>,
    pub ami: Vec<Option<f64>>,
    pub fmi: Vec<Option<f64>>,
}

/// Clusters each domain's features independently.
pub fn relabel(features: &[Tensor<f32>], cfgs: &[DbscanConfig], truth: &[Option<Vec<usize>>]) -> Result<Relabel> {
    let mut out = Relabel {
        assignments: Vec::with_capacity(features.len()),
        ami: Vec::new(),
        fmi: Vec::new(),
    };
    for (d, f) in features.iter().enumerate() {
        let a = dbscan(f, &cfgs[d])?;
        let (ami, fmi) = match truth.get(d).and_then(Option::as_ref) {
            Some(t) => (Some(adjusted_mutual_info(&a.labels, t)?), Some(fowlkes_mallows(&a.labels, t)?)),
            None => (None, None),
        };
        out.ami.push(ami);
        out.fmi.push(fmi);
        out.assignments.push(a);
    }
    Ok(out)
}

fn usable_labels(labels: &[i32]) -> usize {
    labels.iter().filter(|&&l| l != NOISE).collect::<BTreeSet<_>>().len()
}

/// Model, heads and optimiser state over a fixed set of source domains.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    sources: Vec<DomainSet>,
    train_idx: Vec<Vec<usize>>,
    truth: Vec<Option<Vec<usize>>>,
    pub model: Backbone<f32>,
    pub heads: ClassifierBank<f32>,
    pub backbone_opt: Adam<f32>,
    pub head_opt: Adam<f32>,
    epochs_done: usize,
    /// Details of the last divergence, if any.
    pub diagnostic: Option<serde_json::Value>,
}

impl Trainer {
    pub fn new(config: TrainConfig, sources: Vec<DomainSet>) -> Result<Self> {
        let config = Self::effective_config(config, &sources)?;
        let model = Backbone::new(config.model.clone())?;
        let mut t = Trainer {
            backbone_opt: Adam::new(config.adam(), &model.params),
            heads: ClassifierBank::new(model.embedding_dim(), &vec![0; sources.len()], &mut rng::stream(config.seed, &[tag::HEADS])),
            head_opt: Adam::new(config.adam(), &crate::tensor::ParamStore::new()),
            model,
            train_idx: Vec::new(),
            truth: Vec::new(),
            sources,
            config,
            epochs_done: 0,
            diagnostic: None,
        };
        t.index_sources()?;
        if t.config.mode == RunMode::SupervisedDg {
            let classes: Vec<usize> = t.supervised_labels()?.iter().map(|l| usable_labels(l)).collect();
            t.heads = ClassifierBank::new(t.model.embedding_dim(), &classes, &mut rng::stream(t.config.seed, &[tag::HEADS]));
            t.head_opt = Adam::new(t.config.adam(), &t.heads.params);
        }
        Ok(t)
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`]. `config` must
    /// match the saved one except for `epochs`.
    pub fn from_checkpoint(config: TrainConfig, sources: Vec<DomainSet>, ckpt: Checkpoint<f32>) -> Result<Self> {
        let config = Self::effective_config(config, &sources)?;
        let mut saved: TrainConfig = serde_json::from_str(&ckpt.metadata)?;
        // Only the epoch budget may change on resume.
        saved.epochs = config.epochs;
        if saved != config {
            return Err(Error::config("resume", "training config differs from the checkpointed run"));
        }
        if ckpt.backbone.config() != &config.model {
            return Err(Error::config("model", "checkpoint model does not match the config"));
        }
        let mut t = Trainer {
            config,
            sources,
            train_idx: Vec::new(),
            truth: Vec::new(),
            model: ckpt.backbone,
            heads: ckpt.heads,
            backbone_opt: ckpt.backbone_opt,
            head_opt: ckpt.head_opt,
            epochs_done: ckpt.epoch as usize,
            diagnostic: None,
        };
        t.index_sources()?;
        Ok(t)
    }

    fn effective_config(mut config: TrainConfig, sources: &[DomainSet]) -> Result<TrainConfig> {
        config.validate()?;
        if sources.is_empty() {
            return Err(Error::Data("no source domains".into()));
        }
        config.model.num_domains = sources.len();
        config.model.seed = config.seed;
        let (c, h, w) = sources[0].image_shape;
        if sources.iter().any(|s| s.image_shape != (c, h, w)) {
            return Err(Error::Data("source domains have different image sizes".into()));
        }
        if config.model.input_channels != c || config.model.input_size != (h, w) {
            return Err(Error::config(
                "model.input_size",
                format!("model expects {}x{:?}, data is {c}x({h}, {w})", config.model.input_channels, config.model.input_size),
            ));
        }
        if let Some(v) = &config.dbscan_per_domain {
            if v.len() != sources.len() {
                return Err(Error::config("dbscan_per_domain", format!("{} entries for {} domains", v.len(), sources.len())));
            }
        }
        config.model.validate()?;
        Ok(config)
    }

    fn index_sources(&mut self) -> Result<()> {
        self.train_idx = self.sources.iter().map(|s| s.indices(Split::Train)).collect();
        for (d, idx) in self.train_idx.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Data(format!("source domain {d} has an empty train split")));
            }
        }
        self.truth = self
            .sources
            .iter()
            .zip(&self.train_idx)
            .map(|(s, idx)| s.identities(idx))
            .collect();
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn sources(&self) -> &[DomainSet] {
        &self.sources
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Ground-truth train identities per domain, when known.
    pub fn truth(&self) -> &[Option<Vec<usize>>] {
        &self.truth
    }

    pub fn iters_per_domain(&self) -> usize {
        self.config.iters_per_domain.unwrap_or_else(|| {
            let largest = self.train_idx.iter().map(Vec::len).max().unwrap_or(0);
            largest.div_ceil(self.config.batch.batch_size()).max(1)
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        Ok(Checkpoint {
            epoch: self.epochs_done as u64,
            backbone: self.model.clone(),
            heads: self.heads.clone(),
            backbone_opt: self.backbone_opt.clone(),
            head_opt: self.head_opt.clone(),
            metadata: serde_json::to_string(&self.config)?,
        })
    }

    /// True identities of each domain's train split mapped to `0..k`.
    pub fn supervised_labels(&self) -> Result<Vec<Vec<i32>>> {
        self.truth
            .iter()
            .enumerate()
            .map(|(d, t)| {
                let t = t
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("supervisedDG: identities required, domain {d} has unlabeled train samples")))?;
                let ids: Vec<usize> = t.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                Ok(t.iter().map(|id| ids.binary_search(id).expect("id collected above") as i32).collect())
            })
            .collect()
    }

    /// L2-normalized eval-mode embeddings of domain `d`'s train split
    /// through its own path.
    pub fn extract_features(&self, d: usize) -> Result<Tensor<f32>> {
        let idx = &self.train_idx[d];
        let images = self.sources[d].images_at(idx)?;
        Ok(l2_normalize(&self.model.embed(&images, d)?))
    }

    /// Sets every running statistic to the plain average of the batch
    /// statistics of the train splits (batches of the configured size).
    pub fn warm_up_running_stats(&mut self) -> Result<()> {
        for s in self.model.norm_states_mut() {
            s.cumulative = true;
        }
        let bs = self.config.batch.batch_size();
        let result = (|| {
            for d in 0..self.sources.len() {
                for chunk in self.train_idx[d].chunks(bs) {
                    let x = self.sources[d].images_at(chunk)?;
                    let mut g = Graph::new();
                    let mut binder = Binder::frozen(self.model.params.len());
                    let v = g.constant(x);
                    self.model.forward(&mut g, &mut binder, v, d, Mode::Train)?;
                }
            }
            Ok(())
        })();
        for s in self.model.norm_states_mut() {
            s.cumulative = false;
        }
        result
    }

    /// Clusters every domain and rebuilds the heads (fresh weights and a
    /// fresh head optimiser) to match the cluster counts.
    pub fn relabel(&mut self) -> Result<Relabel> {
        let features = (0..self.sources.len()).map(|d| self.extract_features(d)).collect::<Result<Vec<_>>>()?;
        let cfgs: Vec<DbscanConfig> = (0..self.sources.len()).map(|d| self.config.dbscan_for(d)).collect();
        let r = relabel(&features, &cfgs, &self.truth)?;
        let classes: Vec<usize> = r.assignments.iter().map(|a| a.num_clusters).collect();
        let mut head_rng = rng::stream(self.config.seed, &[tag::HEADS, self.epochs_done as u64]);
        self.heads = ClassifierBank::new(self.model.embedding_dim(), &classes, &mut head_rng);
        self.head_opt = Adam::new(self.config.adam(), &self.heads.params);
        Ok(r)
    }

    /// One epoch of round-robin training on per-domain labels (`NOISE`
    /// samples are never drawn). Does not advance the epoch counter.
    pub fn train_epoch(&mut self, labels: &[Vec<i32>]) -> Result<EpochTraining> {
        let num_domains = self.sources.len();
        if labels.len() != num_domains || labels.iter().zip(&self.train_idx).any(|(l, i)| l.len() != i.len()) {
            return Err(Error::invalid("labels must cover every domain's train split"));
        }
        let epoch = self.epochs_done as u64;
        let mut sampler = rng::stream(self.config.seed, &[tag::SAMPLER, epoch]);
        let mut aug_rng = rng::stream(self.config.seed, &[tag::AUGMENT, epoch]);
        let aug = self.config.augment_config();
        let skipped: Vec<bool> = (0..num_domains)
            .map(|d| usable_labels(&labels[d]) < 2 || self.heads.head(d).is_none())
            .collect();
        for (d, &s) in skipped.iter().enumerate() {
            if s {
                log::warn!("epoch {epoch}: domain {d} has fewer than two usable labels, skipping");
            }
        }
        let mut out = EpochTraining {
            cls_loss: 0.0,
            tri_loss: 0.0,
            steps: 0,
            iterations: vec![0; num_domains],
            skipped: skipped.clone(),
            batches: Vec::new(),
        };
        for _ in 0..self.iters_per_domain() {
            for d in 0..num_domains {
                if skipped[d] {
                    continue;
                }
                let Some(batch) = sample_pk_batch(&labels[d], &self.config.batch, &mut sampler) else {
                    continue;
                };
                let idx: Vec<usize> = batch.indices.iter().map(|&i| self.train_idx[d][i]).collect();
                let images = augment(&self.sources[d].images_at(&idx)?, &aug, &mut aug_rng)?;
                let (cls, tri) = self.step(d, images, &batch.labels, &idx)?;
                out.cls_loss += cls;
                out.tri_loss += tri;
                out.steps += 1;
                out.iterations[d] += 1;
                out.batches.push(BatchRecord {
                    domain: d,
                    samples: batch.indices,
                    labels: batch.labels,
                });
            }
        }
        if out.steps > 0 {
            out.cls_loss /= out.steps as f64;
            out.tri_loss /= out.steps as f64;
        }
        Ok(out)
    }

    fn step(&mut self, d: usize, images: Tensor<f32>, labels: &[usize], sample_rows: &[usize]) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let mut bb = Binder::trainable(self.model.params.len());
        let mut hb = Binder::trainable(self.heads.params.len());
        let forward = (|| {
            let x = g.constant(images);
            let emb = self.model.forward(&mut g, &mut bb, x, d, Mode::Train)?;
            let logits = self.heads.classify(&mut g, &mut hb, emb, d)?;
            let cls = cross_entropy(&mut g, logits, labels)?;
            let tri = triplet_batch_hard(&mut g, emb, labels, &self.config.triplet)?;
            Ok((cls, tri, total_loss(&mut g, cls, tri)?))
        })();
        let (cls, tri, loss) = match forward {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => return Err(self.diverged(d, sample_rows, f64::NAN, f64::NAN, &format!("non-finite {op}"))),
            Err(e) => return Err(e),
        };
        let (c, t, l) = (f64::from(g.item(cls)), f64::from(g.item(tri)), f64::from(g.item(loss)));
        if !l.is_finite() {
            return Err(self.diverged(d, sample_rows, c, t, &format!("loss {l}")));
        }
        g.backward(loss)?;
        self.backbone_opt.step(&mut self.model.params, &bb.gradients(&g))?;
        self.head_opt.step(&mut self.heads.params, &hb.gradients(&g))?;
        Ok((c, t))
    }

    fn diverged(&mut self, d: usize, sample_rows: &[usize], c: f64, t: f64, what: &str) -> Error {
        let ids: Vec<u64> = sample_rows.iter().map(|&i| self.sources[d].records[i].sample_id).collect();
        self.diagnostic = Some(self.diagnose(d, &ids, c, t));
        Error::Diverged(format!("epoch {} domain {d}: {what} (cls {c}, tri {t}) on samples {ids:?}", self.epochs_done))
    }

    fn diagnose(&self, d: usize, sample_ids: &[u64], cls: f64, tri: f64) -> serde_json::Value {
        let params: Vec<serde_json::Value> = self
            .model
            .params
            .iter()
            .map(|(name, t)| {
                let finite = t.data().iter().all(|v| v.is_finite());
                let norm = t.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
                serde_json::json!({ "name": name, "finite": finite, "l2": norm })
            })
            .collect();
        let stats: Vec<serde_json::Value> = self
            .model
            .norm_states()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let st = &s.domains()[d.min(s.domains().len() - 1)];
                let finite = st.running_mean.iter().chain(&st.running_var).all(|v| v.is_finite());
                let max_var = st.running_var.iter().copied().fold(0.0f32, f32::max);
                serde_json::json!({ "layer": i, "finite": finite, "max_running_var": max_var })
            })
            .collect();
        serde_json::json!({
            "epoch": self.epochs_done,
            "domain": d,
            "sample_ids": sample_ids,
            "cls_loss": cls,
            "tri_loss": tri,
            "parameters": params,
            "running_stats": stats,
        })
    }

    /// Labels and clustering info for the next epoch, per mode.
    fn epoch_labels(&mut self) -> Result<(Vec<Vec<i32>>, Vec<DomainEpochLog>)> {
        if self.config.mode == RunMode::SupervisedDg {
            let labels = self.supervised_labels()?;
            let logs = labels
                .iter()
                .enumerate()
                .map(|(d, l)| DomainEpochLog {
                    domain: d,
                    num_clusters: usable_labels(l),
                    num_noise: 0,
                    ami: Some(1.0),
                    fmi: Some(1.0),
                    iterations: 0,
                    skipped: false,
                })
                .collect();
            return Ok((labels, logs));
        }
        let r = self.relabel()?;
        let logs = r
            .assignments
            .iter()
            .enumerate()
            .map(|(d, a)| DomainEpochLog {
                domain: d,
                num_clusters: a.num_clusters,
                num_noise: a.num_noise(),
                ami: r.ami[d],
                fmi: r.fmi[d],
                iterations: 0,
                skipped: false,
            })
            .collect();
        Ok((r.assignments.into_iter().map(|a| a.labels).collect(), logs))
    }

    /// Relabels (or takes true labels) and trains one epoch.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        if self.epochs_done == 0 && self.config.warmup_running_stats {
            self.warm_up_running_stats()?;
        }
        let (labels, mut domains) = self.epoch_labels()?;
        let t = self.train_epoch(&labels)?;
        for (log, (&it, &sk)) in domains.iter_mut().zip(t.iterations.iter().zip(&t.skipped)) {
            log.iterations = it;
            log.skipped = sk;
        }
        let log = EpochLog {
            epoch: self.epochs_done,
            domains,
            cls_loss: t.cls_loss,
            tri_loss: t.tri_loss,
            steps: t.steps,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.epochs_done += 1;
        Ok(log)
    }

    /// Evaluates on the sources' own query/gallery splits (each through its
    /// own path, plus fused).
    pub fn evaluate_sources(&self) -> Result<Vec<EvalReport>> {
        (0..self.sources.len())
            .map(|d| {
                let cluster = self.truth[d].as_ref().map(|_| (FeaturePath::Domain(d), &self.config.dbscan));
                evaluate(&self.model, &self.sources[d], PathSelection::Single(d), cluster)
            })
            .collect()
    }

    /// Evaluates on unseen domains with every path and the fused feature.
    pub fn evaluate_targets(&self, targets: &[DomainSet]) -> Result<Vec<EvalReport>> {
        targets
            .iter()
            .map(|t| {
                let labelled = t.identities(&t.indices(Split::Train)).is_some_and(|v| !v.is_empty());
                let cluster = labelled.then_some((FeaturePath::Fused, &self.config.dbscan));
                evaluate(&self.model, t, PathSelection::All, cluster)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub epochs: usize,
    pub resumed_from: Option<usize>,
    pub final_epoch: Option<EpochLog>,
    pub source_reports: Vec<EvalReport>,
    pub target_reports: Vec<EvalReport>,
}

/// Artifacts written by [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub epoch_log: PathBuf,
    pub summary: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        RunPaths {
            checkpoint: out_dir.join(CHECKPOINT_FILE),
            epoch_log: out_dir.join(EPOCH_LOG_FILE),
            summary: out_dir.join(SUMMARY_FILE),
        }
    }
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_epoch_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(log)? + "\n";
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Full training run with a checkpoint and a log line after every epoch.
///
/// With `resume`, training continues from `out_dir`'s checkpoint and the
/// log is cut back to the checkpointed epoch. `targets` are evaluated at
/// the end; in `UDAwoSL` mode the sources are evaluated as well.
pub fn run(config: &TrainConfig, sources: Vec<DomainSet>, targets: &[DomainSet], out_dir: &Path, resume: bool) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = RunPaths::new(out_dir);
    let (mut trainer, resumed_from) = if resume {
        let ckpt = load_checkpoint(&paths.checkpoint)?;
        let trainer = Trainer::from_checkpoint(config.clone(), sources, ckpt)?;
        let done = trainer.epochs_done();
        let mut logs = if paths.epoch_log.exists() { read_epoch_log(&paths.epoch_log)? } else { Vec::new() };
        if logs.len() < done {
            return Err(Error::Data(format!("epoch log has {} entries, checkpoint is at epoch {done}", logs.len())));
        }
        logs.truncate(done);
        write_epoch_log(&paths.epoch_log, &logs)?;
        (trainer, Some(done))
    } else {
        let trainer = Trainer::new(config.clone(), sources)?;
        write_epoch_log(&paths.epoch_log, &[])?;
        (trainer, None)
    };

    let mut last = None;
    while trainer.epochs_done() < trainer.config().epochs {
        let log = match trainer.run_epoch() {
            Ok(l) => l,
            Err(e) => {
                if let Some(diag) = &trainer.diagnostic {
                    let p = out_dir.join(DIAGNOSTIC_FILE);
                    std::fs::write(&p, serde_json::to_string_pretty(diag)?).map_err(|err| Error::io(&p, err))?;
                }
                return Err(e);
            }
        };
        log::info!(
            "epoch {} cls {:.4} tri {:.4} clusters {:?}",
            log.epoch,
            log.cls_loss,
            log.tri_loss,
            log.domains.iter().map(|d| d.num_clusters).collect::<Vec<_>>()
        );
        append_epoch_log(&paths.epoch_log, &log)?;
        save_checkpoint(&paths.checkpoint, &trainer.checkpoint()?)?;
        last = Some(log);
    }

    let source_reports = if trainer.config().mode == RunMode::UdaWoSl {
        trainer.evaluate_sources()?
    } else {
        Vec::new()
    };
    let summary = RunSummary {
        mode: trainer.config().mode,
        epochs: trainer.epochs_done(),
        resumed_from,
        final_epoch: last,
        source_reports,
        target_reports: trainer.evaluate_targets(targets)?,
    };
    std::fs::write(&paths.summary, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&paths.summary, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests;
