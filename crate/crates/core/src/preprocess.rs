//! Resizing, z-score normalization and training-time augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::{bilinear, gaussian_blur, nearest, resize_bilinear, resize_nearest};
use crate::phantom::rng_from;
use crate::volume::LabeledVolume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZScoreScope {
    #[default]
    Volume,
    Slice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub volume: LabeledVolume,
    /// Set when a normalization group had zero variance and was zero-filled.
    pub constant_input: bool,
}

/// Resize every slice to `target` and z-score the intensities.
pub fn preprocess(v: &LabeledVolume, target: (usize, usize), scope: ZScoreScope) -> Result<Preprocessed> {
    v.validate()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!("target size {target:?} must be positive")));
    }
    let [d, h, w] = v.shape;
    let mut out = v.clone();
    if (h, w) != (th, tw) {
        let mut ints = Vec::with_capacity(d * th * tw);
        let mut labs = Vec::with_capacity(d * th * tw);
        for z in 0..d {
            ints.extend(resize_bilinear(v.slice_intensities(z), h, w, th, tw));
            labs.extend(resize_nearest(v.slice_labels(z), h, w, th, tw));
        }
        out.shape = [d, th, tw];
        out.spacing = [
            v.spacing[0],
            v.spacing[1] * h as f64 / th as f64,
            v.spacing[2] * w as f64 / tw as f64,
        ];
        out.intensities = ints;
        out.labels = labs;
    }
    let group = match scope {
        ZScoreScope::Volume => out.len(),
        ZScoreScope::Slice => th * tw,
    };
    let mut constant_input = false;
    for chunk in out.intensities.chunks_mut(group.max(1)) {
        constant_input |= !zscore(chunk);
    }
    if constant_input {
        log::warn!("volume '{}' has constant intensity; zero-filled", v.id());
    }
    Ok(Preprocessed {
        volume: out,
        constant_input,
    })
}

/// Normalizes in place; returns false (and zero-fills) for a constant group.
fn zscore(x: &mut [f32]) -> bool {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        x.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    for v in x.iter_mut() {
        *v = ((*v as f64 - mean) / std) as f32;
    }
    true
}

/// `(probability, low, high)` for one transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranged {
    pub p: f64,
    pub low: f64,
    pub high: f64,
}

impl Ranged {
    pub const fn off() -> Self {
        Ranged { p: 0.0, low: 0.0, high: 0.0 }
    }

    fn draw(&self, rng: &mut impl Rng) -> Option<f64> {
        if self.p <= 0.0 || rng.random::<f64>() >= self.p {
            return None;
        }
        Some(if self.high > self.low {
            rng.random_range(self.low..=self.high)
        } else {
            self.low
        })
    }
}

/// In-plane augmentation. Rotation is in degrees; scaling is a zoom factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation: Ranged,
    pub scaling: Ranged,
    pub noise: Ranged,
    pub blur: Ranged,
    pub brightness: Ranged,
    pub contrast: Ranged,
    /// Probability of mirroring along each in-plane axis `[y, x]`.
    pub mirror: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation: Ranged { p: 0.2, low: -15.0, high: 15.0 },
            scaling: Ranged { p: 0.2, low: 0.85, high: 1.15 },
            noise: Ranged { p: 0.15, low: 0.0, high: 0.1 },
            blur: Ranged { p: 0.1, low: 0.5, high: 1.0 },
            brightness: Ranged { p: 0.15, low: 0.9, high: 1.1 },
            contrast: Ranged { p: 0.15, low: 0.85, high: 1.15 },
            mirror: [0.0, 0.0],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation: Ranged::off(),
            scaling: Ranged::off(),
            noise: Ranged::off(),
            blur: Ranged::off(),
            brightness: Ranged::off(),
            contrast: Ranged::off(),
            mirror: [0.0, 0.0],
        }
    }
}

pub fn augment(v: &LabeledVolume, cfg: &AugmentConfig, seed: u64) -> LabeledVolume {
    let mut rng = rng_from(seed);
    augment_with(v, cfg, &mut rng)
}

/// Same as [`augment`] but drawing from a caller-owned generator.
pub fn augment_with(v: &LabeledVolume, cfg: &AugmentConfig, rng: &mut impl Rng) -> LabeledVolume {
    let [d, h, w] = v.shape;
    let mut out = v.clone();
    let angle = cfg.rotation.draw(rng);
    let zoom = cfg.scaling.draw(rng);
    let flip = [rng.random::<f64>() < cfg.mirror[0], rng.random::<f64>() < cfg.mirror[1]];
    if angle.is_some() || zoom.is_some() {
        let theta = angle.unwrap_or(0.0).to_radians();
        let zoom = zoom.unwrap_or(1.0);
        let (s, c) = theta.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        for z in 0..d {
            let si = v.slice_intensities(z);
            let sl = v.slice_labels(z);
            let fill = si.iter().copied().fold(f32::INFINITY, f32::min);
            for y in 0..h {
                for x in 0..w {
                    // inverse map: output pixel -> source coordinate
                    let (dy, dx) = ((y as f64 - cy) / zoom, (x as f64 - cx) / zoom);
                    let sy = cy + c * dy - s * dx;
                    let sx = cx + s * dy + c * dx;
                    let i = (z * h + y) * w + x;
                    out.intensities[i] = bilinear(si, h, w, sy, sx, fill);
                    out.labels[i] = nearest(sl, h, w, sy, sx, 0);
                }
            }
        }
    }
    if flip[0] || flip[1] {
        mirror(&mut out, flip[0], flip[1]);
    }
    if let Some(sigma) = cfg.blur.draw(rng) {
        for z in 0..d {
            gaussian_blur(&mut out.intensities[z * h * w..(z + 1) * h * w], h, w, sigma);
        }
    }
    if let Some(b) = cfg.brightness.draw(rng) {
        out.intensities.iter_mut().for_each(|v| *v *= b as f32);
    }
    if let Some(k) = cfg.contrast.draw(rng) {
        let mean = out.intensities.iter().map(|&v| v as f64).sum::<f64>() / out.len().max(1) as f64;
        out.intensities
            .iter_mut()
            .for_each(|v| *v = (mean + (*v as f64 - mean) * k) as f32);
    }
    if let Some(sigma) = cfg.noise.draw(rng) {
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("valid sigma");
            out.intensities
                .iter_mut()
                .for_each(|v| *v += n.sample(rng) as f32);
        }
    }
    out
}

/// Flip intensities and labels along the in-plane axes.
pub fn mirror(v: &mut LabeledVolume, flip_y: bool, flip_x: bool) {
    let [d, h, w] = v.shape;
    let src_i = v.intensities.clone();
    let src_l = v.labels.clone();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let sy = if flip_y { h - 1 - y } else { y };
                let sx = if flip_x { w - 1 - x } else { x };
                let (o, s) = ((z * h + y) * w + x, (z * h + sy) * w + sx);
                v.intensities[o] = src_i[s];
                v.labels[o] = src_l[s];
            }
        }
    }
}
