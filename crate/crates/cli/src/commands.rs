use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dsaf::cluster::{adjusted_mutual_info, dbscan, fowlkes_mallows, DbscanConfig};
use dsaf::data::{generate_synthetic, load_dataset, DomainSet, Split, SynthConfig};
use dsaf::eval::{embed_path, evaluate, export_embeddings, l2_normalize, EvalReport, FeaturePath};
use dsaf::model::{load_checkpoint, Checkpoint};
use dsaf::pipeline::{run, TrainConfig};
use dsaf::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::{ClusterEvalArgs, EvalArgs, ExportArgs, SynthArgs, TrainArgs};

pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const CLUSTER_REPORT_FILE: &str = "cluster_eval.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

/// Parses a JSON config, or the defaults when `path` is `None`. Errors name
/// the offending field and carry serde's line and column.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| dsaf::Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("unknown field") || msg.contains("missing field"))
            .unwrap_or("config")
            .to_string();
        dsaf::Error::config(field, format!("{}: {msg}", path.display())).into()
    })
}

fn load_all(paths: &[impl AsRef<Path>]) -> Result<Vec<DomainSet>> {
    let mut out: Vec<DomainSet> = Vec::new();
    for p in paths {
        let p = p.as_ref();
        out.extend(load_dataset(p).with_context(|| format!("loading {}", p.display()))?);
    }
    out.sort_by_key(|d| d.domain_id);
    let mut seen = BTreeSet::new();
    if let Some(d) = out.iter().find(|d| !seen.insert(d.domain_id)) {
        return Err(dsaf::Error::Data(format!("domain id {} is loaded twice", d.domain_id)).into());
    }
    Ok(out)
}

fn pick_domain(domains: Vec<DomainSet>, id: Option<usize>) -> Result<DomainSet> {
    let ids: Vec<usize> = domains.iter().map(|d| d.domain_id).collect();
    let found = match id {
        Some(id) => domains.into_iter().find(|d| d.domain_id == id),
        None if domains.len() == 1 => domains.into_iter().next(),
        None => return Err(dsaf::Error::config("domain", format!("data holds domains {ids:?}; choose one")).into()),
    };
    found.ok_or_else(|| dsaf::Error::Data(format!("domain {} not found; data holds {ids:?}", id.unwrap_or_default())).into())
}

fn load_model(path: &Path) -> Result<Checkpoint<f32>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_schema(ckpt: &Checkpoint<f32>, domain: &DomainSet) -> Result<()> {
    let m = ckpt.backbone.config();
    let (c, h, w) = domain.image_shape;
    if (m.input_channels, m.input_size) != (c, (h, w)) {
        return Err(dsaf::Error::Data(format!(
            "checkpoint expects {}x{}x{} images, domain {} has {c}x{h}x{w}",
            m.input_channels, m.input_size.0, m.input_size.1, domain.domain_id
        ))
        .into());
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let manifest = RunManifest::start(&args.out, "synth", serde_json::to_value(&cfg)?, Some(cfg.seed))?;
    let result = generate_synthetic(&cfg, &args.out).map_err(anyhow::Error::from).map(|domains| {
        for d in &domains {
            let counts = d.split_counts();
            let identities: BTreeSet<usize> = d.records.iter().filter_map(|r| r.identity).collect();
            println!(
                "domain {}: {} identities, {} train, {} query, {} gallery",
                d.domain_id,
                identities.len(),
                counts.get(&Split::Train).unwrap_or(&0),
                counts.get(&Split::Query).unwrap_or(&0),
                counts.get(&Split::Gallery).unwrap_or(&0),
            );
        }
    });
    manifest.finish(result)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate()?;
    let domains = load_all(&args.data)?;
    if let Some(&missing) = args.holdout.iter().find(|&&h| !domains.iter().any(|d| d.domain_id == h)) {
        bail!(dsaf::Error::Data(format!("held-out domain {missing} is not in the data")));
    }
    let (targets, sources): (Vec<DomainSet>, Vec<DomainSet>) = domains.into_iter().partition(|d| args.holdout.contains(&d.domain_id));
    if sources.is_empty() {
        bail!(dsaf::Error::Data("every domain is held out; nothing to train on".into()));
    }
    log::info!(
        "training {} on source domains {:?}, held out {:?}",
        cfg.mode,
        sources.iter().map(|d| d.domain_id).collect::<Vec<_>>(),
        targets.iter().map(|d| d.domain_id).collect::<Vec<_>>()
    );
    let manifest = RunManifest::start(&args.out, "train", serde_json::to_value(&cfg)?, Some(cfg.seed))?;
    let result = run(&cfg, sources, &targets, &args.out, args.resume).map_err(anyhow::Error::from).map(|summary| {
        for r in summary.source_reports.iter().chain(&summary.target_reports) {
            print!("{}", metrics_table(r));
        }
    });
    manifest.finish(result)
}

/// mAP and CMC as percentages, one row per path.
pub fn metrics_table(report: &EvalReport) -> String {
    let mut s = format!("domain {} ({} queries, {} gallery)\n", report.domain_id, report.num_queries, report.num_gallery);
    let _ = write!(s, "{:<8} {:>6}", "path", "mAP");
    for k in &report.cmc_ranks {
        let _ = write!(s, " {:>7}", format!("Rank-{k}"));
    }
    s.push('\n');
    for p in report.paths.iter().chain(std::iter::once(&report.fused)) {
        let name = if p.path == "fused" { p.path.clone() } else { format!("path-{}", p.path) };
        let _ = write!(s, "{name:<8} {:>6.1}", 100.0 * p.metrics.map);
        for v in &p.metrics.cmc {
            let _ = write!(s, " {:>7.1}", 100.0 * v);
        }
        s.push('\n');
    }
    s
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let manifest = RunManifest::start(
        &args.out,
        "eval",
        serde_json::json!({ "checkpoint": args.checkpoint, "data": args.data, "target_domain": args.target_domain, "paths": args.paths }),
        None,
    )?;
    let result = (|| {
        let ckpt = load_model(&args.checkpoint)?;
        let domain = pick_domain(load_all(&[&args.data])?, args.target_domain)?;
        check_schema(&ckpt, &domain)?;
        let report = evaluate(&ckpt.backbone, &domain, args.paths, None)?;
        report.save(&args.out.join(EVAL_REPORT_FILE))?;
        print!("{}", metrics_table(&report));
        Ok(())
    })();
    manifest.finish(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClustering {
    pub domain_id: usize,
    pub path: String,
    pub num_samples: usize,
    pub num_clusters: usize,
    pub num_noise: usize,
    /// Absent when the train split has no identities.
    pub ami: Option<f64>,
    pub fmi: Option<f64>,
}

/// DBSCAN on L2-normalized `features`, scored against `truth` when known.
pub fn cluster_features(features: &Tensor<f32>, truth: Option<&[usize]>, cfg: &DbscanConfig) -> Result<(usize, usize, Option<f64>, Option<f64>)> {
    let a = dbscan(&l2_normalize(features), cfg)?;
    let scores = match truth {
        Some(t) => (Some(adjusted_mutual_info(&a.labels, t)?), Some(fowlkes_mallows(&a.labels, t)?)),
        None => (None, None),
    };
    Ok((a.num_clusters, a.num_noise(), scores.0, scores.1))
}

pub fn cluster_eval(args: &ClusterEvalArgs) -> Result<()> {
    let manifest = RunManifest::start(
        &args.out,
        "cluster-eval",
        serde_json::json!({ "checkpoint": args.checkpoint, "data": args.data, "domain": args.domain, "path": args.path }),
        None,
    )?;
    let result = (|| {
        let ckpt = load_model(&args.checkpoint)?;
        let train_cfg = TrainConfig::from_json(&ckpt.metadata).context("checkpoint metadata is not a training config")?;
        let path = match args.path.as_str() {
            "fused" => FeaturePath::Fused,
            p => FeaturePath::Domain(p.parse().map_err(|_| dsaf::Error::config("path", format!("expected fused or a domain index, got `{p}`")))?),
        };
        let mut domains = load_all(&[&args.data])?;
        if !args.domain.is_empty() {
            domains.retain(|d| args.domain.contains(&d.domain_id));
            if domains.len() != args.domain.len() {
                bail!(dsaf::Error::Data(format!("domains {:?} not all present in {}", args.domain, args.data.display())));
            }
        }
        let mut rows = Vec::new();
        for d in &domains {
            check_schema(&ckpt, d)?;
            let idx = d.indices(Split::Train);
            let feats = embed_path(&ckpt.backbone, &d.images_at(&idx)?, path)?;
            let truth = d.identities(&idx);
            let (k, noise, ami, fmi) = cluster_features(&feats, truth.as_deref(), &train_cfg.dbscan)?;
            match (ami, fmi) {
                (Some(a), Some(f)) => println!("domain {}: {k} clusters, {noise} noise, AMI {a:.4}, FMI {f:.4}", d.domain_id),
                _ => println!("domain {}: {k} clusters, {noise} noise (no identities; counts only)", d.domain_id),
            }
            rows.push(DomainClustering {
                domain_id: d.domain_id,
                path: path.label(),
                num_samples: idx.len(),
                num_clusters: k,
                num_noise: noise,
                ami,
                fmi,
            });
        }
        let out = args.out.join(CLUSTER_REPORT_FILE);
        std::fs::write(&out, serde_json::to_string_pretty(&rows)?).with_context(|| format!("cannot write {}", out.display()))?;
        Ok(())
    })();
    manifest.finish(result)
}

pub fn export(args: &ExportArgs) -> Result<()> {
    let manifest = RunManifest::start(
        &args.out,
        "export",
        serde_json::json!({
            "checkpoint": args.checkpoint, "data": args.data, "domain": args.domain,
            "paths": args.paths, "project_2d": args.project_2d,
        }),
        None,
    )?;
    let result = (|| {
        let ckpt = load_model(&args.checkpoint)?;
        let domain = pick_domain(load_all(&[&args.data])?, args.domain)?;
        check_schema(&ckpt, &domain)?;
        let rows = export_embeddings(&ckpt.backbone, &domain, args.paths, &args.out.join(EMBEDDINGS_FILE), args.project_2d)?;
        println!("wrote {rows} rows to {}", args.out.join(EMBEDDINGS_FILE).display());
        Ok(())
    })();
    manifest.finish(result)
}
