//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "DSAFCKPT"
//! version    u32 LE
//! dtype      u32 LE   bytes per scalar (4 = f32, 8 = f64)
//! length     u64 LE   payload byte count
//! payload    length bytes
//! checksum   32 bytes SHA-256 of the payload
//! ```
//!
//! The payload is a sequence of little-endian fields: the epoch counter
//! (u64), the model config and free-form metadata as length-prefixed JSON
//! strings, the backbone parameters, every normalization layer's running
//! statistics, the classifier heads and both Adam states. See
//! `docs/formats.md` in the repository for the field-by-field layout.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Backbone, ClassifierBank, ModelConfig};
use crate::error::{Error, Result};
use crate::norm::DomainStats;
use crate::tensor::{Adam, AdamConfig, ParamStore, Scalar, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSAFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;
const DIGEST_LEN: usize = 32;

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Number of completed epochs.
    pub epoch: u64,
    pub backbone: Backbone<T>,
    pub heads: ClassifierBank<T>,
    pub backbone_opt: Adam<T>,
    pub head_opt: Adam<T>,
    /// Free-form JSON (the training config, typically).
    pub metadata: String,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn values<T: Scalar>(&mut self, v: &[T]) {
        self.u64(v.len() as u64);
        for &x in v {
            x.write_le(&mut self.buf);
        }
    }
    fn store<T: Scalar>(&mut self, store: &ParamStore<T>) {
        self.u32(store.len() as u32);
        for (name, t) in store.iter() {
            self.str(name);
            let s = t.shape();
            for d in [s.n, s.c, s.h, s.w] {
                self.u64(d as u64);
            }
            self.values(t.data());
        }
    }
    fn adam<T: Scalar>(&mut self, adam: &Adam<T>) {
        let c = adam.config;
        for v in [c.learning_rate, c.beta1, c.beta2, c.eps] {
            self.f64(v);
        }
        let (m, v) = adam.moments();
        self.u32(adam.steps().len() as u32);
        for i in 0..m.len() {
            self.u64(adam.steps()[i]);
            self.values(&m[i]);
            self.values(&v[i]);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "payload ends early"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::format(self.path, format!("implausible length {n}")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
    fn values<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
    fn store_into<T: Scalar>(&mut self, store: &mut ParamStore<T>, what: &str) -> Result<()> {
        let count = self.u32()? as usize;
        if count != store.len() {
            return Err(Error::format(self.path, format!("{what}: {count} tensors, model has {}", store.len())));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = self.str()?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = self.u64()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            if name != store.name(id) || shape != store.get(id).shape() {
                return Err(Error::format(
                    self.path,
                    format!("{what}: found {name} {shape}, expected {} {}", store.name(id), store.get(id).shape()),
                ));
            }
            let data = self.values::<T>()?;
            *store.get_mut(id) = Tensor::from_vec(shape, data).map_err(|e| Error::format(self.path, e.to_string()))?;
        }
        Ok(())
    }
    fn adam<T: Scalar>(&mut self, store: &ParamStore<T>) -> Result<Adam<T>> {
        let config = AdamConfig {
            learning_rate: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let count = self.u32()? as usize;
        if count != store.len() {
            return Err(Error::format(self.path, format!("optimizer holds {count} slots for {} tensors", store.len())));
        }
        let (mut steps, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for id in store.ids() {
            steps.push(self.u64()?);
            let (a, b) = (self.values::<T>()?, self.values::<T>()?);
            if a.len() != store.get(id).numel() || b.len() != a.len() {
                return Err(Error::format(self.path, "optimizer moment length differs from parameter"));
            }
            m.push(a);
            v.push(b);
        }
        Adam::from_parts(config, steps, m, v)
    }
}

/// Serializes a checkpoint, header and checksum included.
pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.u64(ckpt.epoch);
    w.str(&serde_json::to_string(ckpt.backbone.config())?);
    w.str(&ckpt.metadata);
    w.store(&ckpt.backbone.params);
    let states = ckpt.backbone.norm_states();
    w.u32(states.len() as u32);
    for s in states {
        w.u8(s.cumulative as u8);
        w.u32(s.num_domains() as u32);
        for d in s.domains() {
            w.values(&d.running_mean);
            w.values(&d.running_var);
            w.u64(d.batch_count);
        }
    }
    w.u64(ckpt.heads.embedding_dim() as u64);
    let classes = ckpt.heads.classes();
    w.u32(classes.len() as u32);
    for k in classes {
        w.u64(k as u64);
    }
    w.store(&ckpt.heads.params);
    w.adam(&ckpt.backbone_opt);
    w.adam(&ckpt.head_opt);

    let payload = w.buf;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

/// Parses bytes produced by [`encode`]; `path` only labels errors.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic or header)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let dtype = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if dtype != T::BYTES {
        return Err(Error::format(path, format!("stored with {dtype}-byte scalars, reader uses {}", T::BYTES)));
    }
    let len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected_total = (HEADER_LEN as u64).saturating_add(len).saturating_add(DIGEST_LEN as u64);
    if bytes.len() as u64 != expected_total {
        return Err(Error::format(
            path,
            format!("length {} differs from the {expected_total} bytes the header announces (truncated?)", bytes.len()),
        ));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len as usize];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER_LEN + len as usize..] {
        return Err(Error::Checksum(path.display().to_string()));
    }

    let mut r = Reader { buf: payload, pos: 0, path };
    let epoch = r.u64()?;
    let config: ModelConfig = serde_json::from_str(&r.str()?)?;
    let metadata = r.str()?;
    let mut backbone = Backbone::<T>::new(config)?;
    r.store_into(&mut backbone.params, "backbone")?;
    let count = r.u32()? as usize;
    let mut states = backbone.norm_states_mut();
    if count != states.len() {
        return Err(Error::format(path, format!("{count} normalization states, model has {}", states.len())));
    }
    for s in states.iter_mut() {
        s.cumulative = r.u8()? != 0;
        let domains = r.u32()? as usize;
        let mut list = Vec::with_capacity(domains);
        for _ in 0..domains {
            list.push(DomainStats {
                running_mean: r.values()?,
                running_var: r.values()?,
                batch_count: r.u64()?,
            });
        }
        s.replace_domains(list).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let embedding_dim = r.u64()? as usize;
    let num_heads = r.u32()? as usize;
    let mut classes = Vec::with_capacity(num_heads);
    for _ in 0..num_heads {
        classes.push(r.u64()? as usize);
    }
    // the values are overwritten right after, so the init stream is irrelevant
    let mut heads = ClassifierBank::new(embedding_dim, &classes, &mut ChaCha8Rng::seed_from_u64(0));
    r.store_into(&mut heads.params, "heads")?;
    let backbone_opt = r.adam(&backbone.params)?;
    let head_opt = r.adam(&heads.params)?;
    if r.pos != payload.len() {
        return Err(Error::format(path, "trailing bytes after the payload"));
    }
    Ok(Checkpoint {
        epoch,
        backbone,
        heads,
        backbone_opt,
        head_opt,
        metadata,
    })
}

/// Writes `ckpt` to `path` through a temporary file and a rename.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
