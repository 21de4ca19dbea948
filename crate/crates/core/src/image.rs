//! Planar RGB images with values in `[0, 1]`, PNG I/O and resampling.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// ImageNet per-channel statistics.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Three-channel image stored channel-major (`c * h * w + y * w + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.width * self.height..(c + 1) * self.width * self.height]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(w, h);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, x as usize, y as usize, px[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Integer-aligned crop; pixels outside the image are zero.
    pub fn crop(&self, x0: isize, y0: isize, w: usize, h: usize) -> Image {
        let mut out = Image::new(w, h);
        for c in 0..3 {
            for y in 0..h {
                let sy = y0 + y as isize;
                if sy < 0 || sy >= self.height as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x0 + x as isize;
                    if sx >= 0 && sx < self.width as isize {
                        out.set(c, x, y, self.get(c, sx as usize, sy as usize));
                    }
                }
            }
        }
        out
    }

    /// Writes `src` with its top-left corner at `(x0, y0)`, clipping at the borders.
    pub fn paste(&mut self, src: &Image, x0: isize, y0: isize) {
        for c in 0..3 {
            for y in 0..src.height {
                let dy = y0 + y as isize;
                if dy < 0 || dy >= self.height as isize {
                    continue;
                }
                for x in 0..src.width {
                    let dx = x0 + x as isize;
                    if dx >= 0 && dx < self.width as isize {
                        self.set(c, dx as usize, dy as usize, src.get(c, x, y));
                    }
                }
            }
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5), clamping to the border.
    pub fn sample(&self, c: usize, fx: f32, fy: f32) -> f32 {
        let x = (fx - 0.5).clamp(0.0, (self.width - 1) as f32);
        let y = (fy - 0.5).clamp(0.0, (self.height - 1) as f32);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (x - x0 as f32, y - y0 as f32);
        let top = self.get(c, x0, y0) * (1.0 - ax) + self.get(c, x1, y0) * ax;
        let bot = self.get(c, x0, y1) * (1.0 - ax) + self.get(c, x1, y1) * ax;
        top * (1.0 - ay) + bot * ay
    }

    pub fn resize(&self, w: usize, h: usize) -> Image {
        let b = BBox { x: 0.0, y: 0.0, w: self.width as f64, h: self.height as f64 };
        self.crop_resize(&b, w, h)
    }

    /// Resamples the region `bbox` to `w x h` pixels.
    pub fn crop_resize(&self, bbox: &BBox, w: usize, h: usize) -> Image {
        let mut out = Image::new(w, h);
        let sx = bbox.w as f32 / w as f32;
        let sy = bbox.h as f32 / h as f32;
        for c in 0..3 {
            for y in 0..h {
                let fy = bbox.y as f32 + (y as f32 + 0.5) * sy;
                for x in 0..w {
                    let fx = bbox.x as f32 + (x as f32 + 0.5) * sx;
                    out.set(c, x, y, self.sample(c, fx, fy));
                }
            }
        }
        out
    }

    pub fn channel_means(&self) -> [f32; 3] {
        let n = (self.width * self.height).max(1) as f32;
        [0, 1, 2].map(|c| self.plane(c).iter().sum::<f32>() / n)
    }

    /// Draws a one-pixel rectangle outline.
    pub fn draw_rect(&mut self, bbox: &BBox, color: [f32; 3]) {
        let x0 = bbox.x.floor().max(0.0) as usize;
        let y0 = bbox.y.floor().max(0.0) as usize;
        let x1 = (bbox.x2().ceil() as usize).min(self.width).saturating_sub(1);
        let y1 = (bbox.y2().ceil() as usize).min(self.height).saturating_sub(1);
        if x0 >= self.width || y0 >= self.height {
            return;
        }
        for c in 0..3 {
            for x in x0..=x1 {
                self.set(c, x, y0, color[c]);
                self.set(c, x, y1, color[c]);
            }
            for y in y0..=y1 {
                self.set(c, x0, y, color[c]);
                self.set(c, x1, y, color[c]);
            }
        }
    }
}

/// Stacks images of equal size into a `(B, 3, H, W)` tensor, optionally
/// standardizing each channel with `mean`/`std`.
pub fn batch_tensor(images: &[&Image], stats: Option<([f32; 3], [f32; 3])>) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidInput("empty image batch".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Shape(format!("batch mixes {w}x{h} and {}x{}", img.width, img.height)));
        }
        match stats {
            None => data.extend_from_slice(&img.data),
            Some((mean, std)) => {
                for c in 0..3 {
                    data.extend(img.plane(c).iter().map(|v| (v - mean[c]) / std[c]));
                }
            }
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// A readable whole image, possibly too large to hold decoded at once.
pub trait ImageSource: Sync {
    fn id(&self) -> &str;
    fn dims(&self) -> (usize, usize);
    /// Reads `w x h` pixels from `(x, y)`; areas outside the image are zero.
    fn read_region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image>;
}

/// [`ImageSource`] over an in-memory raster.
pub struct RasterSource {
    id: String,
    image: Image,
}

impl RasterSource {
    pub fn new(id: impl Into<String>, image: Image) -> Self {
        Self { id: id.into(), image }
    }

    pub fn open(id: impl Into<String>, path: &Path) -> Result<Self> {
        Ok(Self::new(id, Image::load(path)?))
    }

    pub fn image(&self) -> &Image {
        &self.image
    }
}

impl ImageSource for RasterSource {
    fn id(&self) -> &str {
        &self.id
    }

    fn dims(&self) -> (usize, usize) {
        (self.image.width, self.image.height)
    }

    fn read_region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        Ok(self.image.crop(x as isize, y as isize, w, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(c, x, y, ((x + 2 * y + c) % 256) as f32 / 255.0);
                }
            }
        }
        img
    }

    #[test]
    fn png_round_trip_is_exact_for_quantized_images() {
        let img = ramp(17, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
    }

    #[test]
    fn crop_pads_with_zero() {
        let img = ramp(4, 4);
        let c = img.crop(2, 2, 4, 4);
        assert_eq!(c.get(0, 0, 0), img.get(0, 2, 2));
        assert_eq!(c.get(1, 3, 3), 0.0);
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = ramp(8, 6);
        assert_eq!(img.resize(8, 6), img);
    }

    #[test]
    fn batch_tensor_normalizes() {
        let mut img = Image::new(2, 2);
        img.plane_mut(0).fill(IMAGENET_MEAN[0]);
        let t = batch_tensor(&[&img], Some((IMAGENET_MEAN, IMAGENET_STD))).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert!(t.data()[..4].iter().all(|v| v.abs() < 1e-6));
    }
}
