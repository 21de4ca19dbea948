//! Pixel and geometric primitives on [`Image`]. Every op keeps values in `[0, 1]`.

use crate::geometry::BBox;
use crate::image::Image;

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

pub fn hflip(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::new(w, h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.set(c, x, y, img.get(c, w - 1 - x, y));
            }
        }
    }
    out
}

pub fn vflip(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::new(w, h);
    for c in 0..3 {
        for y in 0..h {
            out.plane_mut(c)[y * w..(y + 1) * w].copy_from_slice(&img.plane(c)[(h - 1 - y) * w..(h - y) * w]);
        }
    }
    out
}

pub fn hflip_box(b: &BBox, width: f64) -> BBox {
    BBox { x: width - b.x - b.w, ..*b }
}

pub fn vflip_box(b: &BBox, height: f64) -> BBox {
    BBox { y: height - b.y - b.h, ..*b }
}

/// Reflects `v` into `[0, n - 1]` (edge pixel not repeated).
fn reflect(mut v: f32, n: usize) -> f32 {
    let max = (n - 1) as f32;
    if max <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    v = v.rem_euclid(period);
    if v > max {
        period - v
    } else {
        v
    }
}

/// Rotates counter-clockwise by `deg` about the image center with bilinear
/// sampling and reflect padding. A zero angle returns an exact copy.
pub fn rotate(img: &Image, deg: f64) -> Image {
    if deg == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (s, c) = (deg.to_radians().sin() as f32, deg.to_radians().cos() as f32);
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate the destination pixel back by -deg.
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let sx = reflect(c * dx - s * dy + cx, w);
            let sy = reflect(s * dx + c * dy + cy, h);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (sx - x0 as f32, sy - y0 as f32);
            for ch in 0..3 {
                let top = img.get(ch, x0, y0) * (1.0 - ax) + img.get(ch, x1, y0) * ax;
                let bot = img.get(ch, x0, y1) * (1.0 - ax) + img.get(ch, x1, y1) * ax;
                out.set(ch, x, y, clamp01(top * (1.0 - ay) + bot * ay));
            }
        }
    }
    out
}

/// Axis-aligned hull of a box rotated with [`rotate`] on a `w x h` image.
pub fn rotate_box(b: &BBox, deg: f64, w: usize, h: usize) -> BBox {
    if deg == 0.0 {
        return *b;
    }
    let (s, c) = (deg.to_radians().sin(), deg.to_radians().cos());
    // Pixel-center convention: continuous coordinate u maps to pixel u - 0.5.
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let corners = [(b.x, b.y), (b.x2(), b.y), (b.x, b.y2()), (b.x2(), b.y2())];
    let pts = corners.map(|(x, y)| {
        let (dx, dy) = (x - cx, y - cy);
        // Forward map, the inverse of the sampling rotation used by `rotate`.
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    });
    let x1 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let y1 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let x2 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y2 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    BBox { x: x1, y: y1, w: x2 - x1, h: y2 - y1 }
}

/// `w * a + (1 - w) * b`; `b` is resized to `a` if needed.
pub fn blend(a: &Image, b: &Image, w: f32) -> Image {
    let b = if (b.width(), b.height()) == (a.width(), a.height()) { b.clone() } else { b.resize(a.width(), a.height()) };
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| clamp01(w * p + (1.0 - w) * q)).collect();
    Image::from_planar(a.width(), a.height(), data).expect("same size")
}

fn grayscale(img: &Image) -> Vec<f32> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter().zip(g).zip(b).map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
}

/// Scales towards black by `factor`.
pub fn adjust_brightness(img: &Image, factor: f32) -> Image {
    let data = img.data().iter().map(|&v| clamp01(v * factor)).collect();
    Image::from_planar(img.width(), img.height(), data).expect("same size")
}

/// Blends with the mean gray level.
pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let gray = grayscale(img);
    let mean = gray.iter().sum::<f32>() / gray.len().max(1) as f32;
    let data = img.data().iter().map(|&v| clamp01(mean + factor * (v - mean))).collect();
    Image::from_planar(img.width(), img.height(), data).expect("same size")
}

/// Blends with the per-pixel grayscale image.
pub fn adjust_saturation(img: &Image, factor: f32) -> Image {
    let gray = grayscale(img);
    let mut out = img.clone();
    for c in 0..3 {
        for (v, g) in out.plane_mut(c).iter_mut().zip(&gray) {
            *v = clamp01(g + factor * (*v - g));
        }
    }
    out
}

/// Blends with a 3x3 smoothed copy; border pixels are left unchanged.
pub fn adjust_sharpness(img: &Image, factor: f32) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for c in 0..3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                        s += wgt * img.get(c, x + dx - 1, y + dy - 1);
                    }
                }
                let smooth = s / 13.0;
                let v = img.get(c, x, y);
                out.set(c, x, y, clamp01(smooth + factor * (v - smooth)));
            }
        }
    }
    out
}

/// Keeps the top `bits` bits of each 8-bit level.
pub fn posterize(img: &Image, bits: u32) -> Image {
    let mask: u8 = if bits >= 8 { 0xff } else { !((1u8 << (8 - bits)) - 1) };
    let data = img.data().iter().map(|&v| ((clamp01(v) * 255.0).round() as u8 & mask) as f32 / 255.0).collect();
    Image::from_planar(img.width(), img.height(), data).expect("same size")
}

/// Inverts values at or above `threshold`.
pub fn solarize(img: &Image, threshold: f32) -> Image {
    let data = img.data().iter().map(|&v| if v >= threshold { 1.0 - v } else { v }).collect();
    Image::from_planar(img.width(), img.height(), data).expect("same size")
}

/// Stretches each channel to the full range.
pub fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let p = out.plane_mut(c);
        let (lo, hi) = p.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if hi > lo {
            for v in p.iter_mut() {
                *v = clamp01((*v - lo) / (hi - lo));
            }
        }
    }
    out
}

/// Per-channel histogram equalization over 256 levels.
pub fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let p = out.plane_mut(c);
        let levels: Vec<usize> = p.iter().map(|&v| (clamp01(v) * 255.0).round() as usize).collect();
        let mut hist = [0usize; 256];
        for &l in &levels {
            hist[l] += 1;
        }
        // Follows the PIL rule: the step ignores the last non-empty bin.
        let last = hist.iter().rposition(|&n| n > 0).map_or(0, |i| hist[i]);
        let step = (levels.len() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0usize; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255);
            n += hist[i];
        }
        for (v, &l) in p.iter_mut().zip(&levels) {
            *v = lut[l] as f32 / 255.0;
        }
    }
    out
}

/// Region that was erased, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Erased {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    /// Pixels in the extra partial column at `x + w`, so that the total
    /// count `w * h + extra` hits the requested area exactly.
    pub extra: usize,
}

impl Erased {
    pub fn pixels(&self) -> usize {
        self.w * self.h + self.extra
    }
}

/// Fills a block of exactly `area` pixels inside `region` (x, y, w, h) with
/// `fill`: a `w x h` rectangle of the given aspect ratio plus a partial column
/// for the remainder. `u` and `v` in `[0, 1)` place the block.
pub fn erase_exact(img: &mut Image, region: (usize, usize, usize, usize), area: usize, aspect: f64, u: f64, v: f64, fill: [f32; 3]) -> Option<Erased> {
    let (rx, ry, rw, rh) = region;
    if area == 0 || area > rw * rh {
        return None;
    }
    let mut h = ((area as f64 * aspect).sqrt().round() as usize).clamp(1, rh);
    let mut w = area / h;
    // Shrink the height until the block (with its partial column) fits.
    while w + usize::from(area % h != 0) > rw {
        if h == rh {
            return None;
        }
        h += 1;
        w = area / h;
    }
    let extra = area - w * h;
    let span_w = w + usize::from(extra > 0);
    let x = rx + ((rw - span_w + 1) as f64 * u) as usize;
    let y = ry + ((rh - h + 1) as f64 * v) as usize;
    for c in 0..3 {
        for yy in y..y + h {
            for xx in x..x + w {
                img.set(c, xx, yy, fill[c]);
            }
        }
        for yy in y..y + extra {
            img.set(c, x + w, yy, fill[c]);
        }
    }
    Some(Erased { x, y, w, h, extra })
}
