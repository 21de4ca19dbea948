//! Overlapping square tiling of large images and annotation cropping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub id: usize,
    pub origin_x: usize,
    pub origin_y: usize,
    pub size: usize,
    /// Width of real image pixels in the patch; smaller than `size` only when
    /// the image is narrower than a patch and the remainder is zero padding.
    pub valid_w: usize,
    pub valid_h: usize,
}

impl PatchSpec {
    pub fn is_padded(&self) -> bool {
        self.valid_w < self.size || self.valid_h < self.size
    }

    /// Region of real pixels in global coordinates.
    pub fn interior(&self) -> BBox {
        BBox { x: self.origin_x as f64, y: self.origin_y as f64, w: self.valid_w as f64, h: self.valid_h as f64 }
    }

    pub fn file_name(&self, image_id: &str) -> String {
        format!("{image_id}_x{}_y{}.png", self.origin_x, self.origin_y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_w: usize,
    pub image_h: usize,
    pub patch_size: usize,
    pub overlap: f64,
    pub patches: Vec<PatchSpec>,
}

impl TileGrid {
    pub fn stride(&self) -> usize {
        stride_for(self.patch_size, self.overlap)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn stride_for(patch_size: usize, overlap: f64) -> usize {
    ((patch_size as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Patch origins along one axis: multiples of the stride while the patch fits,
/// plus one final origin clamped to `extent - patch` if the edge is not reached.
pub fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let mut origins: Vec<usize> = (0..).map(|i| i * stride).take_while(|o| o + patch <= extent).collect();
    let last = *origins.last().unwrap_or(&0);
    if last + patch < extent {
        origins.push(extent - patch);
    }
    origins
}

/// Row-major grid of patches covering a `image_w x image_h` image.
pub fn make_grid(image_w: usize, image_h: usize, patch_size: usize, overlap: f64) -> Result<TileGrid> {
    if image_w == 0 || image_h == 0 || patch_size == 0 {
        return Err(Error::InvalidInput(format!("cannot tile {image_w}x{image_h} with patch {patch_size}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = stride_for(patch_size, overlap);
    let xs = axis_origins(image_w, patch_size, stride);
    let ys = axis_origins(image_h, patch_size, stride);
    let mut patches = Vec::with_capacity(xs.len() * ys.len());
    for &oy in &ys {
        for &ox in &xs {
            patches.push(PatchSpec {
                id: patches.len(),
                origin_x: ox,
                origin_y: oy,
                size: patch_size,
                valid_w: patch_size.min(image_w),
                valid_h: patch_size.min(image_h),
            });
        }
    }
    Ok(TileGrid { image_w, image_h, patch_size, overlap, patches })
}

/// An annotation mapped into one patch's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchAnnotation {
    /// Index into the annotation slice given to [`crop_annotations`].
    pub index: usize,
    pub cx: f64,
    pub cy: f64,
    pub bbox: BBox,
    /// Set when no patch contains the whole box and it was clipped instead.
    pub truncated: bool,
}

/// Assigns each annotation center to every patch that fully contains its
/// `box_size` box (after clipping that box to the image). Annotations no patch
/// contains go, clipped and flagged, to the patch holding their center.
pub fn crop_annotations(grid: &TileGrid, centers: &[(f64, f64)], box_size: f64) -> Result<BTreeMap<usize, Vec<PatchAnnotation>>> {
    let mut out: BTreeMap<usize, Vec<PatchAnnotation>> = BTreeMap::new();
    let (iw, ih) = (grid.image_w as f64, grid.image_h as f64);
    for (index, &(cx, cy)) in centers.iter().enumerate() {
        if !(0.0..iw).contains(&cx) || !(0.0..ih).contains(&cy) {
            return Err(Error::InvalidInput(format!("annotation {index} at ({cx}, {cy}) outside {iw}x{ih} image")));
        }
        let gt = BBox::centered(cx, cy, box_size)?
            .clip(iw, ih)
            .ok_or_else(|| Error::InvalidInput(format!("annotation {index} box vanishes after clipping")))?;
        let mut placed = false;
        for p in &grid.patches {
            if p.interior().contains(&gt) {
                let (ox, oy) = (p.origin_x as f64, p.origin_y as f64);
                out.entry(p.id).or_default().push(PatchAnnotation { index, cx: cx - ox, cy: cy - oy, bbox: gt.translate(-ox, -oy), truncated: false });
                placed = true;
            }
        }
        if !placed {
            let p = grid
                .patches
                .iter()
                .find(|p| {
                    let r = p.interior();
                    cx >= r.x && cx < r.x2() && cy >= r.y && cy < r.y2()
                })
                .ok_or_else(|| Error::InvalidInput(format!("annotation {index} not covered by the grid")))?;
            let (ox, oy) = (p.origin_x as f64, p.origin_y as f64);
            if let Some(b) = gt.clip(p.interior().x2(), p.interior().y2()).and_then(|b| BBox::from_corners(b.x.max(ox), b.y.max(oy), b.x2(), b.y2()).ok()) {
                out.entry(p.id).or_default().push(PatchAnnotation { index, cx: cx - ox, cy: cy - oy, bbox: b.translate(-ox, -oy), truncated: true });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = make_grid(512, 512, 512, 0.2).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.stride(), 410);
        assert_eq!(axis_origins(1024, 512, 410), vec![0, 410, 512]);
        assert_eq!(make_grid(1024, 1024, 512, 0.2).unwrap().len(), 9);
        let big = make_grid(7200, 5400, 512, 0.2).unwrap();
        assert_eq!(axis_origins(7200, 512, 410).len(), 18);
        assert_eq!(axis_origins(5400, 512, 410).len(), 13);
        assert_eq!(big.len(), 234);
    }

    #[test]
    fn small_images_get_one_padded_patch() {
        let g = make_grid(300, 700, 512, 0.2).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.patches.iter().all(|p| p.origin_x == 0 && p.valid_w == 300 && p.is_padded()));
    }

    #[test]
    fn invalid_grid_arguments() {
        assert!(make_grid(0, 10, 512, 0.2).is_err());
        assert!(make_grid(1024, 1024, 512, 1.0).is_err());
    }

    #[test]
    fn crop_examples() {
        let one = make_grid(512, 512, 512, 0.2).unwrap();
        let m = crop_annotations(&one, &[(256.0, 256.0)], 50.0).unwrap();
        assert_eq!(m[&0][0].bbox, BBox::new(231.0, 231.0, 50.0, 50.0).unwrap());
        let g = make_grid(1024, 1024, 512, 0.2).unwrap();
        let m = crop_annotations(&g, &[(445.0, 40.0)], 50.0).unwrap();
        let hosts: Vec<usize> = m.keys().map(|&id| g.patches[id].origin_x).collect();
        assert_eq!(hosts, vec![0, 410]);
        assert!(m.values().flatten().all(|a| !a.truncated));
        // A 20 px box at (420, 10) still fits in the x=410 column; the default
        // 50 px box starts at x=395 and fits only in the first column.
        let m = crop_annotations(&g, &[(420.0, 10.0)], 20.0).unwrap();
        let hosts: Vec<usize> = m.keys().map(|&id| g.patches[id].origin_x).collect();
        assert_eq!(hosts, vec![0, 410]);
        let m = crop_annotations(&g, &[(420.0, 10.0)], 50.0).unwrap();
        assert_eq!(m.keys().map(|&id| g.patches[id].origin_x).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn file_names_follow_convention() {
        let g = make_grid(1024, 1024, 512, 0.2).unwrap();
        assert_eq!(g.patches[1].file_name("slide7"), "slide7_x410_y0.png");
    }
}
