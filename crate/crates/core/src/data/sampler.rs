//! P×K identity sampling and image augmentation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::NOISE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    /// Identities per batch (P).
    pub identities: usize,
    /// Images per identity (K).
    pub images_per_identity: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            identities: 16,
            images_per_identity: 4,
        }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.identities * self.images_per_identity
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::config("batch_spec.identities", "need at least 2 identities per batch"));
        }
        if self.images_per_identity < 2 {
            return Err(Error::config("batch_spec.images_per_identity", "need at least 2 images per identity"));
        }
        Ok(())
    }
}

/// Sample indices into the labelled set with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws a P×K batch from `labels` (`NOISE` entries are never chosen).
///
/// Returns `None` when fewer than two labels are usable. With fewer than P
/// labels every usable label is taken. Labels with fewer than K samples are
/// drawn with replacement.
pub fn sample_pk_batch(labels: &[i32], spec: &BatchSpec, rng: &mut impl Rng) -> Option<PkBatch> {
    let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != NOISE {
            groups.entry(l).or_default().push(i);
        }
    }
    if groups.len() < 2 {
        return None;
    }
    let keys: Vec<i32> = groups.keys().copied().collect();
    let p = spec.identities.min(keys.len());
    let k = spec.images_per_identity;
    let chosen: Vec<i32> = keys.choose_multiple(rng, p).copied().collect();
    let mut batch = PkBatch {
        indices: Vec::with_capacity(p * k),
        labels: Vec::with_capacity(p * k),
    };
    for label in chosen {
        let members = &groups[&label];
        if members.len() >= k {
            batch.indices.extend(members.choose_multiple(rng, k).copied());
        } else {
            batch.indices.extend((0..k).map(|_| members[rng.gen_range(0..members.len())]));
        }
        batch.labels.extend(std::iter::repeat(label as usize).take(k));
    }
    Some(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Crop padding; `None` means `max(1, h / 64)`.
    pub padding: Option<usize>,
    pub random_erasing: bool,
    pub erasing_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_probability: 0.5,
            padding: None,
            random_erasing: false,
            erasing_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No flip, crop or erasing.
    pub fn none() -> Self {
        AugmentConfig {
            flip_probability: 0.0,
            padding: Some(0),
            random_erasing: false,
            erasing_probability: 0.0,
        }
    }
}

fn flip_plane(plane: &mut [f32], w: usize) {
    for row in plane.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Random flip, zero-padded random crop back to the input size, and
/// optional random erasing, applied per image.
pub fn augment(images: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let shape = images.shape();
    let (c, h, w) = (shape.c, shape.h, shape.w);
    let pad = cfg.padding.unwrap_or((h / 64).max(1));
    let mut out = images.clone();
    let mut canvas = vec![0.0f32; (h + 2 * pad) * (w + 2 * pad)];
    let pw = w + 2 * pad;
    for n in 0..shape.n {
        let row = &mut out.data_mut()[n * c * h * w..(n + 1) * c * h * w];
        if rng.gen_bool(cfg.flip_probability) {
            for plane in row.chunks_exact_mut(h * w) {
                flip_plane(plane, w);
            }
        }
        if pad > 0 {
            let oy = rng.gen_range(0..=2 * pad);
            let ox = rng.gen_range(0..=2 * pad);
            for plane in row.chunks_exact_mut(h * w) {
                canvas.fill(0.0);
                for y in 0..h {
                    canvas[(y + pad) * pw + pad..(y + pad) * pw + pad + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
                }
                for y in 0..h {
                    plane[y * w..(y + 1) * w].copy_from_slice(&canvas[(y + oy) * pw + ox..(y + oy) * pw + ox + w]);
                }
            }
        }
        if cfg.random_erasing && rng.gen_bool(cfg.erasing_probability) {
            erase(row, c, h, w, rng);
        }
    }
    Ok(out)
}

/// Fills a random rectangle (2–40% of the area, aspect 0.3–3.3) with
/// uniform noise in [-1, 1).
fn erase(img: &mut [f32], c: usize, h: usize, w: usize, rng: &mut impl Rng) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = rng.gen_range(0.02..0.4) * area;
        let aspect: f64 = rng.gen_range(0.3f64.ln()..3.3f64.ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.gen_range(0..=h - eh);
        let x0 = rng.gen_range(0..=w - ew);
        for ch in 0..c {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    img[(ch * h + y) * w + x] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        return;
    }
}
