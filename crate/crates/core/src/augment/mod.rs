//! Seedable training augmentations for both stages: box-aware transforms for
//! detector patches and pixel transforms for classifier crops.

pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detection,
    Classification,
}

/// Pixel-only RandAugment operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelOp {
    Identity,
    AutoContrast,
    Equalize,
    Brightness,
    Color,
    Contrast,
    Sharpness,
    Posterize,
    Solarize,
}

impl PixelOp {
    pub const ALL: [PixelOp; 9] = [
        PixelOp::Identity,
        PixelOp::AutoContrast,
        PixelOp::Equalize,
        PixelOp::Brightness,
        PixelOp::Color,
        PixelOp::Contrast,
        PixelOp::Sharpness,
        PixelOp::Posterize,
        PixelOp::Solarize,
    ];

    /// Applies the op at `magnitude` out of [`RandAugment::BINS`]; `sign`
    /// picks the direction of signed enhancement ops.
    pub fn apply(self, img: &Image, magnitude: u32, sign: bool) -> Image {
        let m = magnitude.min(RandAugment::BINS) as f32 / RandAugment::BINS as f32;
        let factor = if sign { 1.0 + 0.9 * m } else { 1.0 - 0.9 * m };
        match self {
            PixelOp::Identity => img.clone(),
            PixelOp::AutoContrast => ops::autocontrast(img),
            PixelOp::Equalize => ops::equalize(img),
            PixelOp::Brightness => ops::adjust_brightness(img, factor),
            PixelOp::Color => ops::adjust_saturation(img, factor),
            PixelOp::Contrast => ops::adjust_contrast(img, factor),
            PixelOp::Sharpness => ops::adjust_sharpness(img, factor),
            PixelOp::Posterize => ops::posterize(img, 8 - (4.0 * m).round() as u32),
            PixelOp::Solarize => ops::solarize(img, 1.0 - m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandAugment {
    pub num_ops: usize,
    pub magnitude: u32,
}

impl RandAugment {
    /// Magnitudes run from 0 to `BINS`.
    pub const BINS: u32 = 30;

    pub fn apply<R: Rng>(&self, img: &Image, rng: &mut R) -> Image {
        let mut out = img.clone();
        for _ in 0..self.num_ops {
            let op = PixelOp::ALL[rng.random_range(0..PixelOp::ALL.len())];
            let sign = rng.random_bool(0.5);
            out = op.apply(&out, self.magnitude, sign);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentProfile {
    pub stage: Stage,
    /// Rotation angle range in degrees, sampled uniformly.
    pub rotation: (f64, f64),
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub mixup_p: f64,
    pub mixup_weight: (f64, f64),
    pub mosaic_p: f64,
    /// Mosaic runs only while the 0-based epoch index is below this.
    pub mosaic_epochs: usize,
    /// Brightness, contrast and saturation jitter strengths.
    pub color_jitter: (f64, f64, f64),
    pub randaugment: RandAugment,
    pub erase_p: f64,
    pub erase_ratio: (f64, f64),
    /// Confine the erased block to a randomly chosen half of the image.
    pub erase_half: bool,
    /// Boxes keeping less than this fraction of their area are dropped.
    pub min_visible: f64,
    /// Side length classifier crops must have.
    pub crop_size: usize,
    pub seed: u64,
}

impl AugmentProfile {
    pub fn detection() -> Self {
        Self {
            stage: Stage::Detection,
            rotation: (0.0, 180.0),
            hflip_p: 0.5,
            vflip_p: 0.5,
            mixup_p: 0.3,
            mixup_weight: (0.0, 1.0),
            mosaic_p: 1.0,
            mosaic_epochs: 20,
            color_jitter: (0.0, 0.0, 0.0),
            randaugment: RandAugment { num_ops: 2, magnitude: 9 },
            erase_p: 0.4,
            erase_ratio: (0.02, 0.1),
            erase_half: false,
            min_visible: 0.25,
            crop_size: 64,
            seed: 0,
        }
    }

    pub fn classification() -> Self {
        Self {
            stage: Stage::Classification,
            rotation: (-15.0, 15.0),
            hflip_p: 0.5,
            vflip_p: 0.0,
            mixup_p: 0.2,
            mixup_weight: (0.0, 1.0),
            mosaic_p: 0.0,
            mosaic_epochs: 0,
            color_jitter: (0.2, 0.2, 0.1),
            randaugment: RandAugment { num_ops: 3, magnitude: 5 },
            erase_p: 0.5,
            erase_ratio: (0.02, 0.15),
            erase_half: true,
            min_visible: 0.25,
            crop_size: 64,
            seed: 0,
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Detection => Self::detection(),
            Stage::Classification => Self::classification(),
        }
    }

    /// Every probability zero, no rotation, jitter or RandAugment ops.
    pub fn identity(stage: Stage) -> Self {
        Self {
            rotation: (0.0, 0.0),
            hflip_p: 0.0,
            vflip_p: 0.0,
            mixup_p: 0.0,
            mosaic_p: 0.0,
            color_jitter: (0.0, 0.0, 0.0),
            randaugment: RandAugment { num_ops: 0, magnitude: 0 },
            erase_p: 0.0,
            ..Self::for_stage(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [("hflip_p", self.hflip_p), ("vflip_p", self.vflip_p), ("mixup_p", self.mixup_p), ("mosaic_p", self.mosaic_p), ("erase_p", self.erase_p), ("min_visible", self.min_visible)];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} outside [0, 1]")));
            }
        }
        let ranges = [("rotation", self.rotation), ("mixup_weight", self.mixup_weight), ("erase_ratio", self.erase_ratio)];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("augment.{name} = [{lo}, {hi}] is not an interval")));
            }
        }
        if self.mixup_weight.0 < 0.0 || self.mixup_weight.1 > 1.0 || self.erase_ratio.0 < 0.0 || self.erase_ratio.1 > 1.0 {
            return Err(Error::Config("mixup weights and erase ratios must lie in [0, 1]".into()));
        }
        let (b, c, s) = self.color_jitter;
        if [b, c, s].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("color jitter strengths must lie in [0, 1]".into()));
        }
        if self.randaugment.magnitude > RandAugment::BINS {
            return Err(Error::Config(format!("randaugment magnitude above {}", RandAugment::BINS)));
        }
        Ok(())
    }

    /// Independent RNG stream `stream` of this profile's seed.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// A detector training patch with boxes in its pixel frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DetSample {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn chance<R: Rng>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Clips transformed boxes to the canvas and drops those keeping less than
/// `min_visible` of their area.
fn clip_boxes(boxes: impl IntoIterator<Item = BBox>, w: f64, h: f64, min_visible: f64) -> Vec<BBox> {
    boxes
        .into_iter()
        .filter_map(|b| {
            let area = b.area();
            let c = b.clip(w, h)?;
            (area > 0.0 && c.area() >= min_visible * area).then_some(c)
        })
        .collect()
}

/// Erases a block of `round(ratio * area)` pixels with the per-channel mean,
/// anywhere or inside one random half.
pub fn random_erase<R: Rng>(img: &mut Image, ratio: f64, half: bool, rng: &mut R) -> Option<ops::Erased> {
    let (w, h) = (img.width(), img.height());
    let area = (ratio * (w * h) as f64).round() as usize;
    let region = if half {
        match rng.random_range(0..4) {
            0 => (0, 0, w / 2, h),
            1 => (w / 2, 0, w - w / 2, h),
            2 => (0, 0, w, h / 2),
            _ => (0, h / 2, w, h - h / 2),
        }
    } else {
        (0, 0, w, h)
    };
    let aspect = (rng.random_range((0.3f64).ln()..=(1.0f64 / 0.3).ln())).exp();
    let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
    let fill = img.channel_means();
    ops::erase_exact(img, region, area, aspect, u, v, fill)
}

/// Four patches tiled 2x2 at native scale into a double-size canvas, from
/// which the patch-size window centered at `(cx, cy)` is cut. Keeping the
/// native scale avoids a shift in object size once mosaic switches off.
pub fn mosaic(parts: [&DetSample; 4], center: (f64, f64), min_visible: f64) -> DetSample {
    let (w, h) = (parts[0].image.width(), parts[0].image.height());
    let x0 = (center.0 - w as f64 / 2.0).round().clamp(0.0, w as f64) as isize;
    let y0 = (center.1 - h as f64 / 2.0).round().clamp(0.0, h as f64) as isize;
    let mut canvas = Image::new(w, h);
    let mut boxes = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        let img = if (p.image.width(), p.image.height()) == (w, h) { p.image.clone() } else { p.image.resize(w, h) };
        let (sx, sy) = (w as f64 / p.image.width() as f64, h as f64 / p.image.height() as f64);
        let ox = if i % 2 == 0 { 0 } else { w as isize } - x0;
        let oy = if i < 2 { 0 } else { h as isize } - y0;
        canvas.paste(&img, ox, oy);
        let moved = p.boxes.iter().map(|b| BBox { x: b.x * sx + ox as f64, y: b.y * sy + oy as f64, w: b.w * sx, h: b.h * sy });
        boxes.extend(clip_boxes(moved, w as f64, h as f64, min_visible));
    }
    DetSample { image: canvas, boxes }
}

/// Pixel mixup `w * a + (1 - w) * b` with the union of both box sets.
pub fn mixup(a: &DetSample, b: &DetSample, w: f32) -> DetSample {
    let image = ops::blend(&a.image, &b.image, w);
    let (sx, sy) = (a.image.width() as f64 / b.image.width() as f64, a.image.height() as f64 / b.image.height() as f64);
    let mut boxes = a.boxes.clone();
    boxes.extend(b.boxes.iter().map(|bb| BBox { x: bb.x * sx, y: bb.y * sy, w: bb.w * sx, h: bb.h * sy }));
    DetSample { image, boxes }
}

/// Detector-stage augmentation. `pool` supplies partner patches for mosaic
/// and mixup; with an empty pool neither is applied.
pub fn augment_detection<R: Rng>(sample: &DetSample, pool: &[DetSample], profile: &AugmentProfile, epoch: usize, rng: &mut R) -> Result<DetSample> {
    let (w, h) = (sample.image.width() as f64, sample.image.height() as f64);
    if sample.boxes.iter().any(|b| b.x < 0.0 || b.y < 0.0 || b.x2() > w + 1e-9 || b.y2() > h + 1e-9) {
        return Err(Error::InvalidInput("detection sample has boxes outside the patch".into()));
    }
    let mut s = sample.clone();
    let pick = |rng: &mut R| &pool[rng.random_range(0..pool.len())];

    if epoch < profile.mosaic_epochs && !pool.is_empty() && chance(rng, profile.mosaic_p) {
        let (a, b, c) = (pick(rng), pick(rng), pick(rng));
        let center = (rng.random_range(0.5 * w..=1.5 * w), rng.random_range(0.5 * h..=1.5 * h));
        s = mosaic([&s, a, b, c], center, profile.min_visible);
    }
    if !pool.is_empty() && chance(rng, profile.mixup_p) {
        let other = pick(rng);
        let wgt = uniform(rng, profile.mixup_weight) as f32;
        s = mixup(&s, other, wgt);
    }
    let angle = uniform(rng, profile.rotation);
    if angle != 0.0 {
        let (iw, ih) = (s.image.width(), s.image.height());
        s.image = ops::rotate(&s.image, angle);
        s.boxes = clip_boxes(s.boxes.iter().map(|b| ops::rotate_box(b, angle, iw, ih)), w, h, profile.min_visible);
    }
    if chance(rng, profile.hflip_p) {
        s.image = ops::hflip(&s.image);
        s.boxes = s.boxes.iter().map(|b| ops::hflip_box(b, w)).collect();
    }
    if chance(rng, profile.vflip_p) {
        s.image = ops::vflip(&s.image);
        s.boxes = s.boxes.iter().map(|b| ops::vflip_box(b, h)).collect();
    }
    s.image = profile.randaugment.apply(&s.image, rng);
    if chance(rng, profile.erase_p) {
        let ratio = uniform(rng, profile.erase_ratio);
        random_erase(&mut s.image, ratio, profile.erase_half, rng);
    }
    s.boxes = clip_boxes(s.boxes, w, h, 0.0);
    Ok(s)
}

/// Classifier-stage augmentation of a crop with soft label `label`. `partner`
/// is the mixup candidate; the returned label mixes with the same weight.
pub fn augment_classification<R: Rng>(crop: &Image, label: f32, partner: Option<(&Image, f32)>, profile: &AugmentProfile, rng: &mut R) -> Result<(Image, f32)> {
    let n = profile.crop_size;
    if crop.width() != n || crop.height() != n {
        return Err(Error::Shape(format!("classifier crop is {}x{}, expected {n}x{n}", crop.width(), crop.height())));
    }
    let mut img = crop.clone();
    let mut y = label;
    if chance(rng, profile.hflip_p) {
        img = ops::hflip(&img);
    }
    if chance(rng, profile.vflip_p) {
        img = ops::vflip(&img);
    }
    let angle = uniform(rng, profile.rotation);
    img = ops::rotate(&img, angle);
    let (b, c, s) = profile.color_jitter;
    if b > 0.0 {
        img = ops::adjust_brightness(&img, uniform(rng, (1.0 - b, 1.0 + b)) as f32);
    }
    if c > 0.0 {
        img = ops::adjust_contrast(&img, uniform(rng, (1.0 - c, 1.0 + c)) as f32);
    }
    if s > 0.0 {
        img = ops::adjust_saturation(&img, uniform(rng, (1.0 - s, 1.0 + s)) as f32);
    }
    if let Some((other, other_label)) = partner {
        if chance(rng, profile.mixup_p) {
            let w = uniform(rng, profile.mixup_weight) as f32;
            img = ops::blend(&img, other, w);
            y = w * y + (1.0 - w) * other_label;
        }
    }
    img = profile.randaugment.apply(&img, rng);
    if chance(rng, profile.erase_p) {
        let ratio = uniform(rng, profile.erase_ratio);
        random_erase(&mut img, ratio, profile.erase_half, rng);
    }
    Ok((img, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * w * h).map(|_| rng.random::<f32>()).collect();
        Image::from_planar(w, h, data).unwrap()
    }

    fn sample(seed: u64) -> DetSample {
        DetSample { image: noise(64, 64, seed), boxes: vec![BBox::new(10.0, 20.0, 12.0, 14.0).unwrap(), BBox::new(40.0, 40.0, 20.0, 20.0).unwrap()] }
    }

    #[test]
    fn identity_profiles_change_nothing() {
        let s = sample(1);
        let pool = vec![sample(2), sample(3)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_detection(&s, &pool, &AugmentProfile::identity(Stage::Detection), 0, &mut rng).unwrap();
        assert_eq!(out, s);
        let (img, y) = augment_classification(&s.image, 1.0, Some((&pool[0].image, 0.0)), &AugmentProfile::identity(Stage::Classification), &mut rng).unwrap();
        assert_eq!((img, y), (s.image, 1.0));
    }

    #[test]
    fn mosaic_respects_epoch_gate() {
        let s = DetSample { image: noise(64, 64, 1), boxes: vec![] };
        let pool = vec![sample(2)];
        let profile = AugmentProfile { mosaic_p: 1.0, mosaic_epochs: 20, ..AugmentProfile::identity(Stage::Detection) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let late = augment_detection(&s, &pool, &profile, 20, &mut rng).unwrap();
        assert_eq!(late, s);
        let early = augment_detection(&s, &pool, &profile, 19, &mut rng).unwrap();
        assert_ne!(early.image, s.image);
    }

    #[test]
    fn mosaic_keeps_native_scale() {
        let parts = [sample(1), sample(2), sample(3), sample(4)];
        let m = mosaic([&parts[0], &parts[1], &parts[2], &parts[3]], (64.0, 64.0), 0.25);
        // The window is centered on the shared corner: each quadrant shows the
        // far quarter of its patch.
        assert_eq!(m.image.get(0, 0, 0), parts[0].image.get(0, 32, 32));
        assert_eq!(m.image.get(0, 63, 63), parts[3].image.get(0, 31, 31));
        // The first patch keeps its (40, 40) box and the last its (10, 20) box,
        // both shifted by the window offset and unscaled; the second is cut at the
        // bottom edge.
        assert_eq!(m.boxes, vec![BBox::new(8.0, 8.0, 20.0, 20.0).unwrap(), BBox::new(42.0, 52.0, 12.0, 12.0).unwrap()]);
        let corner = mosaic([&parts[0], &parts[1], &parts[2], &parts[3]], (32.0, 32.0), 0.25);
        assert_eq!(corner.image, parts[0].image);
        assert_eq!(corner.boxes, parts[0].boxes);
    }

    #[test]
    fn mixup_matches_direct_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..10 {
            let (a, b) = (sample(i), sample(100 + i));
            let w = rng.random::<f32>();
            let m = mixup(&a, &b, w);
            for (k, v) in m.image.data().iter().enumerate() {
                let expect = w * a.image.data()[k] + (1.0 - w) * b.image.data()[k];
                assert!((v - expect.clamp(0.0, 1.0)).abs() < 1e-6);
            }
            assert_eq!(m.boxes.len(), 4);
        }
        let (a, b) = (sample(1), sample(2));
        assert_eq!(mixup(&a, &b, 1.0).image, a.image);
    }

    #[test]
    fn classification_mixup_weight_one_keeps_first_sample() {
        let a = noise(64, 64, 4);
        let b = noise(64, 64, 5);
        let profile = AugmentProfile { mixup_p: 1.0, mixup_weight: (1.0, 1.0), ..AugmentProfile::identity(Stage::Classification) };
        let (img, y) = augment_classification(&a, 1.0, Some((&b, 0.0)), &profile, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((img, y), (a, 1.0));
    }

    #[test]
    fn half_erase_area_is_exact() {
        let mut img = noise(64, 64, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_erase(&mut img, 0.15, true, &mut rng).unwrap();
        assert_eq!(e.pixels(), 614);
        let inside_half = (e.x + e.w + usize::from(e.extra > 0) <= 32) || e.x >= 32 || (e.y + e.h <= 32) || e.y >= 32;
        assert!(inside_half);
    }

    #[test]
    fn wrong_crop_size_is_rejected() {
        let img = noise(32, 32, 1);
        assert!(augment_classification(&img, 1.0, None, &AugmentProfile::classification(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn full_profiles_are_deterministic_and_in_range() {
        let pool = vec![sample(2), sample(3), sample(4)];
        let p = AugmentProfile::detection();
        p.validate().unwrap();
        for epoch in [0, 25] {
            let a = augment_detection(&sample(1), &pool, &p, epoch, &mut p.rng(5)).unwrap();
            let b = augment_detection(&sample(1), &pool, &p, epoch, &mut p.rng(5)).unwrap();
            assert_eq!(a, b);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.boxes.iter().all(|b| b.x >= 0.0 && b.y >= 0.0 && b.x2() <= 64.0 && b.y2() <= 64.0));
        }
        let c = AugmentProfile::classification();
        let x = augment_classification(&noise(64, 64, 1), 1.0, Some((&noise(64, 64, 2), 0.0)), &c, &mut c.rng(3)).unwrap();
        let y = augment_classification(&noise(64, 64, 1), 1.0, Some((&noise(64, 64, 2), 0.0)), &c, &mut c.rng(3)).unwrap();
        assert_eq!(x, y);
        assert!(x.0.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn validation_rejects_bad_profiles() {
        assert!(AugmentProfile { hflip_p: 1.5, ..AugmentProfile::detection() }.validate().is_err());
        assert!(AugmentProfile { rotation: (10.0, 0.0), ..AugmentProfile::detection() }.validate().is_err());
        assert!(AugmentProfile::classification().validate().is_ok());
    }
}
