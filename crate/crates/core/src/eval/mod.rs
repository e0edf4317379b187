//! Retrieval evaluation (mAP, CMC) with single-path and fused features,
//! clustering quality against ground truth, and embedding export.

mod pca;

pub use pca::{pca_project, top_eigenvectors, PCA_ITERATIONS, PCA_TOLERANCE};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{adjusted_mutual_info, dbscan, fowlkes_mallows, DbscanConfig};
use crate::data::{DomainSet, Split};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::tensor::{Scalar, Tensor};
use crate::Mode;

/// Rank cut-offs reported in every CMC curve.
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Query/gallery identities and cameras.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalProtocol {
    pub query_ids: Vec<usize>,
    pub query_cams: Vec<usize>,
    pub gallery_ids: Vec<usize>,
    pub gallery_cams: Vec<usize>,
}

impl RetrievalProtocol {
    pub fn new(query_ids: Vec<usize>, query_cams: Vec<usize>, gallery_ids: Vec<usize>, gallery_cams: Vec<usize>) -> Result<Self> {
        if query_ids.len() != query_cams.len() || gallery_ids.len() != gallery_cams.len() {
            return Err(Error::invalid("identity and camera lists differ in length"));
        }
        Ok(RetrievalProtocol {
            query_ids,
            query_cams,
            gallery_ids,
            gallery_cams,
        })
    }

    /// Protocol over a domain's query and gallery splits.
    pub fn from_domain(domain: &DomainSet) -> Result<Self> {
        let q = domain.indices(Split::Query);
        let g = domain.indices(Split::Gallery);
        let missing = || Error::Data("query/gallery records need identities".into());
        RetrievalProtocol::new(
            domain.identities(&q).ok_or_else(missing)?,
            domain.cameras(&q),
            domain.identities(&g).ok_or_else(missing)?,
            domain.cameras(&g),
        )
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }

    /// 1-based ranks of the valid matches of query `q` after removing
    /// same-identity same-camera gallery items from `ranking`.
    pub fn match_ranks(&self, q: usize, ranking: &[usize]) -> Vec<usize> {
        let (qid, qcam) = (self.query_ids[q], self.query_cams[q]);
        let mut rank = 0;
        let mut ranks = Vec::new();
        for &g in ranking {
            let same_id = self.gallery_ids[g] == qid;
            let same_cam = self.gallery_cams[g] == qcam;
            if same_id && same_cam {
                continue;
            }
            rank += 1;
            if same_id {
                ranks.push(rank);
            }
        }
        ranks
    }
}

/// Cosine distances `(nq, ng)` row-major, computed on L2-normalized rows.
pub fn cosine_distances<T: Scalar>(query: &Tensor<T>, gallery: &Tensor<T>) -> Result<Vec<f64>> {
    let (nq, ng) = (query.shape().n, gallery.shape().n);
    let d = query.shape().row_len();
    if gallery.shape().row_len() != d {
        return Err(Error::shape("rank_gallery", format!("query dim {d} vs gallery dim {}", gallery.shape().row_len())));
    }
    let normed = |t: &Tensor<T>, n: usize| -> Vec<f64> {
        let mut out: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
        for row in out.chunks_exact_mut(d).take(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    };
    let q = normed(query, nq);
    let g = normed(gallery, ng);
    let mut dist = Vec::with_capacity(nq * ng);
    for qi in q.chunks_exact(d) {
        for gj in g.chunks_exact(d) {
            dist.push(1.0 - qi.iter().zip(gj).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Ok(dist)
}

/// Per query, gallery indices by ascending cosine distance; ties go to the
/// lower gallery index.
pub fn rank_gallery<T: Scalar>(query: &Tensor<T>, gallery: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    let ng = gallery.shape().n;
    if ng == 0 {
        return Err(Error::invalid("empty gallery"));
    }
    let dist = cosine_distances(query, gallery)?;
    Ok(dist
        .chunks_exact(ng)
        .map(|row| {
            let mut idx: Vec<usize> = (0..ng).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Accuracy at each entry of [`CMC_RANKS`].
    pub cmc: Vec<f64>,
    pub retained_queries: usize,
    pub dropped_queries: usize,
}

impl RetrievalMetrics {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }
}

fn check_rankings(rankings: &[Vec<usize>], protocol: &RetrievalProtocol) -> Result<()> {
    if rankings.len() != protocol.num_queries() {
        return Err(Error::invalid(format!("{} rankings for {} queries", rankings.len(), protocol.num_queries())));
    }
    Ok(())
}

/// Average precision from 1-based match ranks.
pub fn average_precision(ranks: &[usize]) -> f64 {
    ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64
}

/// mAP and CMC at `ks`; queries without a valid match are dropped.
pub fn retrieval_metrics(rankings: &[Vec<usize>], protocol: &RetrievalProtocol, ks: &[usize]) -> Result<RetrievalMetrics> {
    check_rankings(rankings, protocol)?;
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; ks.len()];
    let mut retained = 0;
    for (q, ranking) in rankings.iter().enumerate() {
        let ranks = protocol.match_ranks(q, ranking);
        let Some(&first) = ranks.first() else { continue };
        retained += 1;
        ap_sum += average_precision(&ranks);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first <= k {
                *h += 1;
            }
        }
    }
    if retained == 0 {
        return Err(Error::Data("no query has a valid match in the gallery".into()));
    }
    Ok(RetrievalMetrics {
        map: ap_sum / retained as f64,
        cmc: hits.iter().map(|&h| h as f64 / retained as f64).collect(),
        retained_queries: retained,
        dropped_queries: rankings.len() - retained,
    })
}

pub fn mean_average_precision(rankings: &[Vec<usize>], protocol: &RetrievalProtocol) -> Result<f64> {
    Ok(retrieval_metrics(rankings, protocol, &[])?.map)
}

pub fn cmc_curve(rankings: &[Vec<usize>], protocol: &RetrievalProtocol, ks: &[usize]) -> Result<Vec<f64>> {
    Ok(retrieval_metrics(rankings, protocol, ks)?.cmc)
}

/// Which feature paths to evaluate. The fused path is always included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathSelection {
    Fused,
    All,
    Single(usize),
}

impl std::str::FromStr for PathSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(PathSelection::Fused),
            "all" => Ok(PathSelection::All),
            other => other
                .parse()
                .map(PathSelection::Single)
                .map_err(|_| Error::config("paths", format!("expected fused, all or a domain index, got `{other}`"))),
        }
    }
}

/// Feature path of a model: one domain's branch or the mean over all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturePath {
    Domain(usize),
    Fused,
}

impl FeaturePath {
    pub fn label(&self) -> String {
        match self {
            FeaturePath::Domain(d) => d.to_string(),
            FeaturePath::Fused => "fused".to_string(),
        }
    }
}

impl PathSelection {
    pub fn resolve(&self, num_domains: usize) -> Result<Vec<FeaturePath>> {
        let mut out = match *self {
            PathSelection::Fused => vec![],
            PathSelection::All => (0..num_domains).map(FeaturePath::Domain).collect(),
            PathSelection::Single(d) if d < num_domains => vec![FeaturePath::Domain(d)],
            PathSelection::Single(d) => return Err(Error::DomainOutOfRange { domain: d, num_domains }),
        };
        out.push(FeaturePath::Fused);
        Ok(out)
    }
}

/// Eval-mode embeddings of `images` through `path`.
pub fn embed_path<T: Scalar>(model: &Backbone<T>, images: &Tensor<f32>, path: FeaturePath) -> Result<Tensor<T>> {
    let x = images.cast::<T>();
    match path {
        FeaturePath::Domain(d) => model.embed(&x, d),
        FeaturePath::Fused => model.forward_fused(&x, Mode::Eval),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    /// Domain index or `fused`.
    pub path: String,
    #[serde(flatten)]
    pub metrics: RetrievalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub path: String,
    pub num_clusters: usize,
    pub num_noise: usize,
    pub ami: f64,
    pub fmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain_id: usize,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub dropped_queries: usize,
    pub cmc_ranks: Vec<usize>,
    pub paths: Vec<PathReport>,
    pub fused: PathReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clustering: Option<ClusterReport>,
}

impl EvalReport {
    pub fn path(&self, label: &str) -> Option<&PathReport> {
        std::iter::once(&self.fused).chain(&self.paths).find(|p| p.path == label)
    }

    /// Best mAP among the single-domain paths.
    pub fn best_single_path_map(&self) -> Option<f64> {
        self.paths.iter().map(|p| p.metrics.map).reduce(f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Retrieval metrics of `path` on the domain's query/gallery splits.
pub fn evaluate_path<T: Scalar>(model: &Backbone<T>, domain: &DomainSet, protocol: &RetrievalProtocol, path: FeaturePath) -> Result<PathReport> {
    let q = domain.images_at(&domain.indices(Split::Query))?;
    let g = domain.images_at(&domain.indices(Split::Gallery))?;
    let qf = embed_path(model, &q, path)?;
    let gf = embed_path(model, &g, path)?;
    let rankings = rank_gallery(&qf, &gf)?;
    Ok(PathReport {
        path: path.label(),
        metrics: retrieval_metrics(&rankings, protocol, &CMC_RANKS)?,
    })
}

/// DBSCAN on the domain's train split through `path`, scored against the
/// train identities. Features are L2-normalized first.
pub fn cluster_quality<T: Scalar>(model: &Backbone<T>, domain: &DomainSet, path: FeaturePath, cfg: &DbscanConfig) -> Result<ClusterReport> {
    let idx = domain.indices(Split::Train);
    let truth = domain
        .identities(&idx)
        .ok_or_else(|| Error::Data(format!("domain {} train split has no identities", domain.domain_id)))?;
    let feats = embed_path(model, &domain.images_at(&idx)?, path)?;
    cluster_report(&feats, &truth, cfg, path.label())
}

/// Clusters `features` and compares the result with `truth`.
pub fn cluster_report<T: Scalar>(features: &Tensor<T>, truth: &[usize], cfg: &DbscanConfig, path: String) -> Result<ClusterReport> {
    let a = dbscan(&l2_normalize(features), cfg)?;
    Ok(ClusterReport {
        path,
        num_clusters: a.num_clusters,
        num_noise: a.num_noise(),
        ami: adjusted_mutual_info(&a.labels, truth)?,
        fmi: fowlkes_mallows(&a.labels, truth)?,
    })
}

/// Row-wise L2 normalization (zero rows stay zero).
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.shape().row_len();
    let mut out = x.clone();
    if d == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm > 0.0 {
            let inv = T::of(1.0 / norm);
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    out
}

/// Evaluates the requested paths on `domain`, plus clustering quality of
/// `cluster` (path and config) when given.
pub fn evaluate<T: Scalar>(
    model: &Backbone<T>,
    domain: &DomainSet,
    paths: PathSelection,
    cluster: Option<(FeaturePath, &DbscanConfig)>,
) -> Result<EvalReport> {
    let protocol = RetrievalProtocol::from_domain(domain)?;
    let mut reports = Vec::new();
    let mut fused = None;
    for path in paths.resolve(model.num_domains())? {
        let r = evaluate_path(model, domain, &protocol, path)?;
        match path {
            FeaturePath::Fused => fused = Some(r),
            FeaturePath::Domain(_) => reports.push(r),
        }
    }
    let fused = fused.expect("resolve always includes the fused path");
    let clustering = match cluster {
        Some((path, cfg)) => Some(cluster_quality(model, domain, path, cfg)?),
        None => None,
    };
    Ok(EvalReport {
        domain_id: domain.domain_id,
        num_queries: protocol.num_queries(),
        num_gallery: protocol.gallery_ids.len(),
        dropped_queries: fused.metrics.dropped_queries,
        cmc_ranks: CMC_RANKS.to_vec(),
        paths: reports,
        fused,
        clustering,
    })
}

/// One exported row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: u64,
    pub domain_id: usize,
    pub path: String,
    pub values: Vec<f64>,
}

/// Writes tab-separated rows `sample_id, domain_id, path_id, values...` for
/// every sample of `domain` and every path of `paths`. With `project_2d`
/// the values are the 2-D PCA projection of all rows together.
pub fn export_embeddings<T: Scalar>(
    model: &Backbone<T>,
    domain: &DomainSet,
    paths: PathSelection,
    out_path: &Path,
    project_2d: bool,
) -> Result<usize> {
    let mut rows = Vec::new();
    for path in paths.resolve(model.num_domains())? {
        let feats = embed_path(model, &domain.images, path)?;
        let d = feats.shape().row_len();
        for (i, r) in domain.records.iter().enumerate() {
            rows.push(EmbeddingRow {
                sample_id: r.sample_id,
                domain_id: r.domain_id,
                path: path.label(),
                values: feats.data()[i * d..(i + 1) * d].iter().map(|v| v.as_f64()).collect(),
            });
        }
    }
    if project_2d && !rows.is_empty() {
        let d = rows[0].values.len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.values.iter().copied()).collect();
        let projected = pca_project(&flat, rows.len(), d, 2)?;
        for (r, p) in rows.iter_mut().zip(projected.chunks_exact(2)) {
            r.values = p.to_vec();
        }
    }
    write_embeddings(&rows, out_path)?;
    Ok(rows.len())
}

pub fn write_embeddings(rows: &[EmbeddingRow], out_path: &Path) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut text = String::from("sample_id\tdomain_id\tpath_id");
    for j in 0..dim {
        let _ = write!(text, "\tv{j}");
    }
    text.push('\n');
    for r in rows {
        let _ = write!(text, "{}\t{}\t{}", r.sample_id, r.domain_id, r.path);
        for v in &r.values {
            let _ = write!(text, "\t{v}");
        }
        text.push('\n');
    }
    std::fs::write(out_path, text).map_err(|e| Error::io(out_path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::format(path, format!("malformed row at line {line}"));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 {
            return Err(bad(i + 1));
        }
        rows.push(EmbeddingRow {
            sample_id: f[0].parse().map_err(|_| bad(i + 1))?,
            domain_id: f[1].parse().map_err(|_| bad(i + 1))?,
            path: f[2].to_string(),
            values: f[3..].iter().map(|v| v.parse().map_err(|_| bad(i + 1))).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}
