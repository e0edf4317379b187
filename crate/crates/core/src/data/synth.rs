//! Synthetic pedestrian-like images with controllable domain style.
//!
//! Each identity is a latent vector `z`. It is rendered as a three-part
//! figure (head, torso, legs) whose region colours are fixed linear maps of
//! `z` and whose torso carries a stripe pattern keyed by `z`. Images of one
//! identity differ by pose shift, brightness and camera. Every camera of a
//! domain has its own per-channel gain and bias; the domain then applies box
//! blur, its per-channel gain and bias, and pixel noise.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{encode_payload, sha256_hex, write_dataset, DomainSet, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub channel_gain: Vec<f32>,
    pub channel_bias: Vec<f32>,
    /// Box-blur radius in pixels.
    pub blur_level: usize,
    pub noise_sigma: f32,
}

impl DomainStyle {
    pub fn neutral(channels: usize, noise_sigma: f32) -> Self {
        DomainStyle {
            channel_gain: vec![1.0; channels],
            channel_bias: vec![0.0; channels],
            blur_level: 0,
            noise_sigma,
        }
    }
}

/// Distance between two styles: log-gain, bias, blur and noise differences.
pub fn style_distance(a: &DomainStyle, b: &DomainStyle) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.channel_gain.iter().zip(&b.channel_gain) {
        s += (f64::from(*x).ln() - f64::from(*y).ln()).powi(2);
    }
    for (x, y) in a.channel_bias.iter().zip(&b.channel_bias) {
        s += f64::from(x - y).powi(2);
    }
    s += (a.blur_level as f64 - b.blur_level as f64).powi(2);
    s += f64::from(a.noise_sigma - b.noise_sigma).powi(2);
    s.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_domains: usize,
    pub train_identities: usize,
    /// Identities shared by the query and gallery splits.
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub num_cameras: usize,
    /// Query images per test identity; the rest go to the gallery.
    pub queries_per_identity: usize,
    /// (c, h, w).
    pub image_size: (usize, usize, usize),
    /// One entry per domain. Empty means derive from `style_distance`.
    pub domain_style: Vec<DomainStyle>,
    /// Scale of the randomly drawn styles when `domain_style` is empty.
    pub style_distance: f32,
    pub noise_sigma: f32,
    /// Scale of each domain's per-camera gain (log scale) and bias.
    pub camera_jitter: f32,
    pub identity_signature_dim: usize,
    /// Every domain renders the same identity set.
    pub shared_identities: bool,
    pub min_style_distance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 2,
            train_identities: 30,
            test_identities: 15,
            images_per_identity: 8,
            num_cameras: 2,
            queries_per_identity: 2,
            image_size: (3, 32, 16),
            domain_style: Vec::new(),
            style_distance: 1.0,
            noise_sigma: 0.05,
            camera_jitter: 0.05,
            identity_signature_dim: 8,
            shared_identities: false,
            min_style_distance: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image_size;
        let positive = [
            ("num_domains", self.num_domains),
            ("train_identities", self.train_identities),
            ("test_identities", self.test_identities),
            ("identity_signature_dim", self.identity_signature_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if c == 0 || h < 8 || w < 4 {
            return Err(Error::config("image_size", "need c ≥ 1, h ≥ 8, w ≥ 4"));
        }
        if self.num_cameras < 2 {
            return Err(Error::config("num_cameras", "query/gallery need at least 2 cameras"));
        }
        if self.queries_per_identity == 0 || self.queries_per_identity >= self.images_per_identity {
            return Err(Error::config("queries_per_identity", "must be in [1, images_per_identity)"));
        }
        if self.images_per_identity < self.num_cameras {
            return Err(Error::config("images_per_identity", "must cover every camera"));
        }
        if !(self.noise_sigma >= 0.0) || !self.style_distance.is_finite() || self.style_distance < 0.0 {
            return Err(Error::config("noise_sigma", "noise and style scales must be finite and non-negative"));
        }
        let styles = self.styles();
        if styles.len() != self.num_domains {
            return Err(Error::config("domain_style", format!("{} styles for {} domains", styles.len(), self.num_domains)));
        }
        for s in &styles {
            if s.channel_gain.len() != c || s.channel_bias.len() != c {
                return Err(Error::config("domain_style", format!("gain/bias need {c} entries")));
            }
            if s.channel_gain.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
                return Err(Error::config("domain_style", "channel gains must be positive"));
            }
            if !(s.noise_sigma >= 0.0) {
                return Err(Error::config("domain_style", "noise_sigma must be non-negative"));
            }
        }
        for i in 0..styles.len() {
            for j in i + 1..styles.len() {
                let d = style_distance(&styles[i], &styles[j]);
                if d < self.min_style_distance {
                    return Err(Error::config(
                        "domain_style",
                        format!("domains {i} and {j} are {d:.4} apart, below min_style_distance {}", self.min_style_distance),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-domain styles, explicit or drawn from `style_distance`.
    pub fn styles(&self) -> Vec<DomainStyle> {
        if !self.domain_style.is_empty() {
            return self.domain_style.clone();
        }
        let c = self.image_size.0;
        let s = self.style_distance;
        (0..self.num_domains)
            .map(|d| {
                let mut r = rng::stream(self.seed, &[tag::SYNTH, 2, d as u64]);
                let gain = (0..c).map(|_| (0.2 * s * normal(&mut r)).exp()).collect();
                let bias = (0..c).map(|_| 0.5 * s * normal(&mut r)).collect();
                DomainStyle {
                    channel_gain: gain,
                    channel_bias: bias,
                    blur_level: 0,
                    noise_sigma: self.noise_sigma,
                }
            })
            .collect()
    }

    pub fn identities_per_domain(&self) -> usize {
        self.train_identities + self.test_identities
    }
}

fn normal(r: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(r)
}

/// Fixed maps from signature to region colours, shared by all domains.
struct Renderer {
    c: usize,
    h: usize,
    w: usize,
    /// Three regions, each `c × k`.
    colour_maps: Vec<Vec<f32>>,
    k: usize,
}

impl Renderer {
    fn new(cfg: &SynthConfig) -> Self {
        let (c, h, w) = cfg.image_size;
        let k = cfg.identity_signature_dim;
        let mut r = rng::stream(cfg.seed, &[tag::SYNTH, 0]);
        let scale = 1.0 / (k as f32).sqrt();
        let colour_maps = (0..3).map(|_| (0..c * k).map(|_| scale * 1.5 * normal(&mut r)).collect()).collect();
        Renderer { c, h, w, colour_maps, k }
    }

    /// Clean image of identity `z` with pose shift and brightness.
    fn render(&self, z: &[f32], dy: i64, dx: i64, brightness: f32) -> Vec<f32> {
        let (c, h, w, k) = (self.c, self.h, self.w, self.k);
        let colour = |region: usize, ch: usize| -> f32 {
            let m = &self.colour_maps[region][ch * k..(ch + 1) * k];
            m.iter().zip(z).map(|(a, b)| a * b).sum::<f32>().tanh()
        };
        let hf = h as f32;
        let wf = w as f32;
        let stripe_amp = 0.4 * z[0 % k].tanh();
        let stripe_freq = 2.0 + (z[1 % k].abs() * 2.0).floor().min(3.0);
        let stripe_phase = z[2 % k];
        let mut img = vec![0.0f32; c * h * w];
        for y in 0..h {
            let yy = (y as i64 - dy) as f32 / hf;
            for x in 0..w {
                let xx = (x as i64 - dx) as f32 / wf;
                let region = if (0.05..0.2).contains(&yy) && (0.35..0.65).contains(&xx) {
                    Some(0)
                } else if (0.2..0.55).contains(&yy) && (0.2..0.8).contains(&xx) {
                    Some(1)
                } else if (0.55..0.95).contains(&yy) && (0.25..0.75).contains(&xx) {
                    Some(2)
                } else {
                    None
                };
                let Some(region) = region else { continue };
                let stripe = if region == 1 {
                    stripe_amp * (std::f32::consts::TAU * stripe_freq * yy + stripe_phase).sin()
                } else {
                    0.0
                };
                for ch in 0..c {
                    img[(ch * h + y) * w + x] = brightness * (colour(region, ch) + stripe);
                }
            }
        }
        img
    }
}

pub(super) fn box_blur(img: &mut [f32], c: usize, h: usize, w: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as i64;
    let mut tmp = vec![0.0f32; h * w];
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let xx = (x as i64 + d).clamp(0, w as i64 - 1) as usize;
                    s += plane[y * w + xx];
                }
                tmp[y * w + x] = s / (2 * r + 1) as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let yy = (y as i64 + d).clamp(0, h as i64 - 1) as usize;
                    s += tmp[yy * w + x];
                }
                plane[y * w + x] = s / (2 * r + 1) as f32;
            }
        }
    }
}

/// Builds every domain in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<DomainSet>> {
    cfg.validate()?;
    let (c, h, w) = cfg.image_size;
    let renderer = Renderer::new(cfg);
    let styles = cfg.styles();
    let per_domain = cfg.identities_per_domain();
    let shift_y = (h / 16).max(1) as i64;
    let shift_x = (w / 16).max(1) as i64;
    let mut domains = Vec::with_capacity(cfg.num_domains);
    let mut sample_id = 0u64;
    for (d, style) in styles.iter().enumerate() {
        let mut records = Vec::new();
        let mut data = Vec::new();
        let mut noise_rng = rng::stream(cfg.seed, &[tag::SYNTH, 4, d as u64]);
        // (gain, bias) per camera and channel.
        let cameras: Vec<Vec<(f32, f32)>> = (0..cfg.num_cameras)
            .map(|cam| {
                let mut r = rng::stream(cfg.seed, &[tag::SYNTH, 3, d as u64, cam as u64]);
                (0..c)
                    .map(|_| ((cfg.camera_jitter * normal(&mut r)).exp(), cfg.camera_jitter * normal(&mut r)))
                    .collect()
            })
            .collect();
        for local in 0..per_domain {
            let global = if cfg.shared_identities { local } else { d * per_domain + local };
            let mut zr = rng::stream(cfg.seed, &[tag::SYNTH, 1, global as u64]);
            let z: Vec<f32> = (0..cfg.identity_signature_dim).map(|_| normal(&mut zr)).collect();
            let is_train = local < cfg.train_identities;
            for img_idx in 0..cfg.images_per_identity {
                let mut pr = rng::stream(cfg.seed, &[tag::SYNTH, 5, global as u64, img_idx as u64]);
                let dy = pr.gen_range(-shift_y..=shift_y);
                let dx = pr.gen_range(-shift_x..=shift_x);
                let brightness = 1.0 + 0.1 * (pr.gen::<f32>() * 2.0 - 1.0);
                let camera = img_idx % cfg.num_cameras;
                let mut img = renderer.render(&z, dy, dx, brightness);
                for (ch, &(g, b)) in cameras[camera].iter().enumerate() {
                    for v in &mut img[ch * h * w..(ch + 1) * h * w] {
                        *v = g * *v + b;
                    }
                }
                box_blur(&mut img, c, h, w, style.blur_level);
                for ch in 0..c {
                    let (g, b) = (style.channel_gain[ch], style.channel_bias[ch]);
                    for v in &mut img[ch * h * w..(ch + 1) * h * w] {
                        *v = g * *v + b;
                    }
                }
                if style.noise_sigma > 0.0 {
                    for v in &mut img {
                        *v += style.noise_sigma * normal(&mut noise_rng);
                    }
                }
                let split = if is_train {
                    Split::Train
                } else if img_idx < cfg.queries_per_identity {
                    Split::Query
                } else {
                    Split::Gallery
                };
                let bytes = encode_payload(&img, (c, h, w));
                records.push(SampleRecord {
                    sample_id,
                    domain_id: d,
                    identity: Some(global),
                    camera_id: camera,
                    split,
                    path: format!("img/{sample_id:06}.bin"),
                    checksum: sha256_hex(&bytes),
                });
                data.extend(img);
                sample_id += 1;
            }
        }
        let images = Tensor::from_vec(Shape::new(records.len(), c, h, w), data)?;
        let set = DomainSet {
            domain_id: d,
            image_shape: (c, h, w),
            records,
            images,
        };
        set.validate()?;
        domains.push(set);
    }
    Ok(domains)
}

/// Generates the dataset and writes it under `root`, together with the
/// config as `synth_config.json`.
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> Result<Vec<DomainSet>> {
    let domains = generate(cfg)?;
    write_dataset(&domains, root)?;
    let path = root.join("synth_config.json");
    let json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(domains)
}
