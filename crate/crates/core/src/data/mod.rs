//! Multi-domain image datasets: the synthetic generator, the on-disk
//! manifest/payload format, P×K batch sampling and augmentation.
//!
//! A dataset directory holds one sub-directory per domain. Each domain
//! directory contains `manifest.tsv` and the payload files it references.
//! Manifest lines (tab separated, `#` starts a comment line):
//!
//! ```text
//! sample_id  domain_id  identity|-  camera_id  train|query|gallery  relative/path.bin  sha256-hex
//! ```
//!
//! A payload file is the 4 magic bytes `DSIM`, then `c`, `h`, `w` as
//! little-endian `u32`, then `c·h·w` little-endian `f32` values in CHW order.

mod sampler;
mod synth;

pub use sampler::{augment, sample_pk_batch, AugmentConfig, BatchSpec, PkBatch};
pub use synth::{generate, generate_synthetic, style_distance, DomainStyle, SynthConfig};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const PAYLOAD_MAGIC: &[u8; 4] = b"DSIM";
const MANIFEST_HEADER: &str = "#sample_id\tdomain_id\tidentity\tcamera_id\tsplit\tpath\tsha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub domain_id: usize,
    pub identity: Option<usize>,
    pub camera_id: usize,
    pub split: Split,
    /// Payload path relative to the domain directory.
    pub path: String,
    /// Lower-case hex SHA-256 of the payload file.
    pub checksum: String,
}

impl SampleRecord {
    fn to_line(&self) -> String {
        let identity = self.identity.map_or_else(|| "-".to_string(), |i| i.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.sample_id, self.domain_id, identity, self.camera_id, self.split, self.path, self.checksum
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Data(format!("manifest line {lineno}: {what}"));
        if fields.len() != 7 {
            return Err(bad(&format!("expected 7 fields, found {}", fields.len())));
        }
        let num = |i: usize, name: &str| fields[i].parse::<u64>().map_err(|_| bad(&format!("bad {name} `{}`", fields[i])));
        Ok(SampleRecord {
            sample_id: num(0, "sample_id")?,
            domain_id: num(1, "domain_id")? as usize,
            identity: if fields[2] == "-" { None } else { Some(num(2, "identity")? as usize) },
            camera_id: num(3, "camera_id")? as usize,
            split: fields[4].parse().map_err(|e: Error| bad(&e.to_string()))?,
            path: fields[5].to_string(),
            checksum: fields[6].to_string(),
        })
    }
}

/// All samples of one domain, images held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSet {
    pub domain_id: usize,
    /// (c, h, w) of every image.
    pub image_shape: (usize, usize, usize),
    pub records: Vec<SampleRecord>,
    /// `(records.len(), c, h, w)`, row `i` belongs to `records[i]`.
    pub images: Tensor<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_payload(image: &[f32], (c, h, w): (usize, usize, usize)) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + image.len() * 4);
    out.extend_from_slice(PAYLOAD_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_payload(bytes: &[u8]) -> Result<((usize, usize, usize), Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..4] != PAYLOAD_MAGIC {
        return Err(Error::Data("payload has no image header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = (dim(0), dim(1), dim(2));
    let n = shape.0 * shape.1 * shape.2;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Data(format!("payload holds {} bytes for a {}x{}x{} image", bytes.len(), shape.0, shape.1, shape.2)));
    }
    let values = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok((shape, values))
}

impl DomainSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn images_at(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        self.images.select_rows(indices)
    }

    /// Identities of `indices`, or `None` if any is unknown.
    pub fn identities(&self, indices: &[usize]) -> Option<Vec<usize>> {
        indices.iter().map(|&i| self.records[i].identity).collect()
    }

    pub fn cameras(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.records[i].camera_id).collect()
    }

    /// Record counts per split.
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.split).or_insert(0) += 1;
        }
        counts
    }

    /// Checks record-level invariants.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image_shape;
        if self.images.shape() != Shape::new(self.records.len(), c, h, w) {
            return Err(Error::Data(format!("image tensor {} does not match {} records", self.images.shape(), self.records.len())));
        }
        let mut seen = HashSet::new();
        let mut train_ids = HashSet::new();
        let mut test_ids = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.sample_id) {
                return Err(Error::Data(format!("duplicate sample_id {}", r.sample_id)));
            }
            match (r.split, r.identity) {
                (Split::Train, Some(id)) => {
                    train_ids.insert(id);
                }
                (Split::Train, None) => {}
                (_, Some(id)) => {
                    test_ids.insert(id);
                }
                (split, None) => {
                    return Err(Error::Data(format!("{split} sample {} has no identity", r.sample_id)));
                }
            }
        }
        if let Some(id) = train_ids.intersection(&test_ids).next() {
            return Err(Error::Data(format!("identity {id} appears in both train and query/gallery splits")));
        }
        Ok(())
    }

    /// Copy with train identities hidden.
    pub fn without_train_labels(&self) -> DomainSet {
        let mut out = self.clone();
        for r in out.records.iter_mut().filter(|r| r.split == Split::Train) {
            r.identity = None;
        }
        out
    }

    /// Writes `manifest.tsv` and the payload files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for (i, r) in self.records.iter().enumerate() {
            let bytes = encode_payload(self.images.row(i), self.image_shape);
            if sha256_hex(&bytes) != r.checksum {
                return Err(Error::Data(format!("sample {}: checksum does not match its image", r.sample_id)));
            }
            let path = dir.join(&r.path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            manifest.push_str(&r.to_line());
            manifest.push('\n');
        }
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Reads and verifies one domain directory.
    pub fn load(dir: &Path) -> Result<DomainSet> {
        let mpath = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            records.push(SampleRecord::parse(line, i + 1)?);
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{} lists no samples", mpath.display())));
        }
        let domain_id = records[0].domain_id;
        let mut shape = None;
        let mut data = Vec::new();
        for r in &records {
            if r.domain_id != domain_id {
                return Err(Error::Data(format!("sample {} is in domain {}, manifest is for {domain_id}", r.sample_id, r.domain_id)));
            }
            let path = dir.join(&r.path);
            let bytes = std::fs::read(&path)
                .map_err(|e| Error::Data(format!("sample {}: cannot read payload {}: {e}", r.sample_id, path.display())))?;
            if sha256_hex(&bytes) != r.checksum {
                return Err(Error::Checksum(format!("payload of sample {} ({})", r.sample_id, path.display())));
            }
            let (s, values) = decode_payload(&bytes).map_err(|e| Error::Data(format!("sample {}: {e}", r.sample_id)))?;
            if *shape.get_or_insert(s) != s {
                return Err(Error::Data(format!("sample {} has a different image size", r.sample_id)));
            }
            data.extend(values);
        }
        let (c, h, w) = shape.expect("at least one record");
        let images = Tensor::from_vec(Shape::new(records.len(), c, h, w), data)?;
        let set = DomainSet {
            domain_id,
            image_shape: (c, h, w),
            records,
            images,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Name of domain `d`'s sub-directory.
pub fn domain_dir_name(d: usize) -> String {
    format!("domain_{d}")
}

/// Writes every domain under `root/domain_<id>`.
pub fn write_dataset(domains: &[DomainSet], root: &Path) -> Result<()> {
    for d in domains {
        d.write(&root.join(domain_dir_name(d.domain_id)))?;
    }
    Ok(())
}

/// Loads a single domain directory, or every `domain_*` directory under a
/// dataset root (ordered by domain id).
pub fn load_dataset(path: &Path) -> Result<Vec<DomainSet>> {
    if path.join(MANIFEST_NAME).is_file() {
        return Ok(vec![DomainSet::load(path)?]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let p = entry.path();
        if p.join(MANIFEST_NAME).is_file() {
            dirs.push(p);
        }
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!("{} contains no domain manifest", path.display())));
    }
    let mut sets = dirs.iter().map(|d| DomainSet::load(d)).collect::<Result<Vec<_>>>()?;
    sets.sort_by_key(|s| s.domain_id);
    let mut ids = HashMap::new();
    for s in &sets {
        if ids.insert(s.domain_id, ()).is_some() {
            return Err(Error::Data(format!("domain id {} appears twice", s.domain_id)));
        }
    }
    Ok(sets)
}
