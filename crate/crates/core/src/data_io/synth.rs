//! Synthetic slides: textured stroma with dark compact blobs as positives and
//! rings and elongated smears as look-alike negatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

use super::Annotation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub size: usize,
    pub blobs_per_image: usize,
    /// Look-alike negatives per image.
    pub distractors_per_image: usize,
    pub diameter: (f64, f64),
    /// Minimum distance of a blob center from the image border.
    pub border: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_images: 20, size: 1024, blobs_per_image: 15, distractors_per_image: 15, diameter: (10.0, 30.0), border: 15.0, max_attempts: 2000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorKind {
    Ring,
    Smear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub kind: DistractorKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub distractors: Vec<Distractor>,
}

pub fn image_id(i: usize) -> String {
    format!("synth_{i:03}")
}

const STROMA: [f32; 3] = [0.93, 0.78, 0.86];
const NUCLEUS: [f32; 3] = [0.62, 0.52, 0.78];
const MITOSIS: [f32; 3] = [0.22, 0.12, 0.38];

fn blend_px(img: &mut Image, x: usize, y: usize, color: [f32; 3], a: f32) {
    for c in 0..3 {
        let v = img.get(c, x, y);
        img.set(c, x, y, (v * (1.0 - a) + color[c] * a).clamp(0.0, 1.0));
    }
}

/// Paints `alpha(dx, dy)` over the square of half-width `r` around `(cx, cy)`.
fn stamp(img: &mut Image, cx: f64, cy: f64, r: f64, color: [f32; 3], alpha: impl Fn(f64, f64) -> f64) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, (cx + r).ceil().min(w - 1.0) as usize);
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, (cy + r).ceil().min(h - 1.0) as usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let a = alpha(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy).clamp(0.0, 1.0);
            if a > 0.0 {
                blend_px(img, x, y, color, a as f32);
            }
        }
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Image {
    // Smooth stain variation from a coarse random grid, plus pixel noise.
    let cells = 9;
    let grid: Vec<f32> = (0..cells * cells).map(|_| rng.random_range(-0.05..0.05)).collect();
    let mut img = Image::new(size, size);
    let step = size as f32 / (cells - 1) as f32;
    for y in 0..size {
        let gy = y as f32 / step;
        let (iy, ty) = ((gy.floor() as usize).min(cells - 2), gy - gy.floor().min((cells - 2) as f32));
        for x in 0..size {
            let gx = x as f32 / step;
            let (ix, tx) = ((gx.floor() as usize).min(cells - 2), gx - gx.floor().min((cells - 2) as f32));
            let g = |i: usize, j: usize| grid[j * cells + i];
            let v = (g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx) * (1.0 - ty) + (g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx) * ty;
            let n: f32 = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                img.set(c, x, y, (STROMA[c] + v + n).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn generate_one(cfg: &SynthConfig, index: usize) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.size as f64;
    let mut img = background(cfg.size, &mut rng);

    // Pale interphase nuclei as texture.
    for _ in 0..(cfg.size * cfg.size / 4000) {
        let (cx, cy) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let (rx, ry) = (rng.random_range(4.0..9.0), rng.random_range(4.0..9.0));
        let a = rng.random_range(0.35..0.6);
        stamp(&mut img, cx, cy, 10.0, NUCLEUS, |dx, dy| {
            let d = (dx / rx).powi(2) + (dy / ry).powi(2);
            if d < 1.0 {
                a
            } else {
                0.0
            }
        });
    }

    let id = image_id(index);
    let mut taken: Vec<(f64, f64, f64)> = Vec::new();
    let mut place = |rng: &mut ChaCha8Rng, radius: f64| -> Option<(f64, f64)> {
        for _ in 0..cfg.max_attempts {
            let (cx, cy) = (rng.random_range(cfg.border..size - cfg.border), rng.random_range(cfg.border..size - cfg.border));
            if taken.iter().all(|&(x, y, r)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() > r + radius + 12.0) {
                taken.push((cx, cy, radius));
                return Some((cx, cy));
            }
        }
        None
    };

    let mut annotations = Vec::new();
    for _ in 0..cfg.blobs_per_image {
        let d = rng.random_range(cfg.diameter.0..=cfg.diameter.1);
        let Some((cx, cy)) = place(&mut rng, d / 2.0) else {
            log::warn!("{id}: could not place all blobs, kept {}", annotations.len());
            break;
        };
        let sigma = d / 4.0;
        // Irregular clumped chromatin: a Gaussian core with a few lobes.
        let lobes: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(-d / 5.0..d / 5.0), rng.random_range(-d / 5.0..d / 5.0))).collect();
        stamp(&mut img, cx, cy, d, MITOSIS, |dx, dy| {
            let core = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let lobe = lobes.iter().map(|&(lx, ly)| (-((dx - lx).powi(2) + (dy - ly).powi(2)) / (2.0 * (sigma * 0.6).powi(2))).exp()).fold(0.0, f64::max);
            1.15 * core.max(0.9 * lobe)
        });
        annotations.push(Annotation { image_id: id.clone(), cx, cy, label: Annotation::MITOSIS.into() });
    }

    let mut distractors = Vec::new();
    for k in 0..cfg.distractors_per_image {
        let kind = if k % 2 == 0 { DistractorKind::Ring } else { DistractorKind::Smear };
        let d = rng.random_range(cfg.diameter.0..=cfg.diameter.1);
        let extent = if kind == DistractorKind::Smear { d * 1.2 } else { d / 2.0 + 2.0 };
        let Some((cx, cy)) = place(&mut rng, extent) else { break };
        match kind {
            DistractorKind::Ring => {
                let (r, t) = (d / 2.0, (d / 10.0).max(1.5));
                stamp(&mut img, cx, cy, r + 2.0 * t, MITOSIS, |dx, dy| {
                    let dist = (dx * dx + dy * dy).sqrt();
                    (-(dist - r).powi(2) / (2.0 * t * t)).exp() * 1.1
                });
            }
            DistractorKind::Smear => {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let (len, wid) = (d * 1.2, (d / 8.0).max(1.5));
                let (c, s) = (theta.cos(), theta.sin());
                stamp(&mut img, cx, cy, len, MITOSIS, |dx, dy| {
                    let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                    (-(u / len).powi(2) * 2.0 - (v / wid).powi(2) / 2.0).exp() * 1.1
                });
            }
        }
        distractors.push(Distractor { kind, cx, cy, size: d });
    }
    img.quantize();
    SynthImage { id, image: img, annotations, distractors }
}

/// Generates `cfg.n_images` slides, each from its own RNG stream.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    if cfg.size < 512 {
        return Err(Error::Config(format!("synthetic images must be at least 512 px, got {}", cfg.size)));
    }
    if !(cfg.diameter.0 > 0.0 && cfg.diameter.0 <= cfg.diameter.1) || cfg.border * 2.0 >= cfg.size as f64 {
        return Err(Error::Config("invalid synthetic blob geometry".into()));
    }
    Ok((0..cfg.n_images).into_par_iter().map(|i| generate_one(cfg, i)).collect())
}
