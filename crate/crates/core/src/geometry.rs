//! Box arithmetic, greedy NMS, frame lifting and cross-patch merging.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tiling::PatchSpec;

/// Axis-aligned box covering `[x, x + w) x [y, y + h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite box ({x}, {y}, {w}, {h})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidInput(format!("box with non-positive size {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    /// Square box of side `size` centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, size: f64) -> Result<Self> {
        Self::new(cx - size / 2.0, cy - size / 2.0, size, size)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x: self.x + dx, y: self.y + dy, ..*self }
    }

    /// Intersection with `[0, width) x [0, height)`, or `None` if empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        BBox::from_corners(x1, y1, x2, y2).ok()
    }

    /// True if `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.x2() <= self.x2() && other.y2() <= self.y2()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    Patch(usize),
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: u32,
    pub frame: Frame,
    /// Patch the detection was produced in, kept after lifting.
    pub patch_id: Option<usize>,
    /// Provenance id, unique within one run.
    pub id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, frame: Frame) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidInput(format!("score {score} outside [0, 1]")));
        }
        let patch_id = match frame {
            Frame::Patch(p) => Some(p),
            Frame::Global => None,
        };
        Ok(Self { bbox, score, label: 0, frame, patch_id, id: 0 })
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }
}

/// Canonical order: score descending, then smaller x, then smaller y.
pub fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.x.total_cmp(&b.bbox.x))
        .then_with(|| a.bbox.y.total_cmp(&b.bbox.y))
}

/// Greedy non-maximum suppression: keep the best remaining detection and drop
/// everything overlapping it with IoU strictly above `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| score_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

/// Translates a patch-frame detection into the global frame.
pub fn to_global(d: &Detection, patch: &PatchSpec) -> Result<Detection> {
    match d.frame {
        Frame::Patch(id) if id == patch.id => Ok(Detection {
            bbox: d.bbox.translate(patch.origin_x as f64, patch.origin_y as f64),
            frame: Frame::Global,
            patch_id: Some(id),
            ..d.clone()
        }),
        other => Err(Error::Frame(format!("detection in frame {other:?} cannot be lifted from patch {}", patch.id))),
    }
}

/// Inverse of [`to_global`].
pub fn to_patch(d: &Detection, patch: &PatchSpec) -> Result<Detection> {
    if d.frame != Frame::Global {
        return Err(Error::Frame(format!("detection already in frame {:?}", d.frame)));
    }
    Ok(Detection {
        bbox: d.bbox.translate(-(patch.origin_x as f64), -(patch.origin_y as f64)),
        frame: Frame::Patch(patch.id),
        patch_id: Some(patch.id),
        ..d.clone()
    })
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Attach to the smaller index so roots are deterministic.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Merges detections of the same object reported by overlapping patches.
///
/// Detections are linked when their IoU is at least `iou_threshold`; each
/// connected component is replaced by its best member under [`score_order`].
/// Output is sorted by that order.
pub fn merge_cross_patch(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if let Some(d) = dets.iter().find(|d| d.frame != Frame::Global) {
        return Err(Error::Frame(format!("merge expects global detections, got {:?}", d.frame)));
    }
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| score_order(a, b));
    let n = sorted.len();
    let mut ds = DisjointSet::new(n);
    // Sweep over boxes ordered by left edge; only boxes whose x-ranges overlap
    // can have positive IoU.
    let mut by_x: Vec<usize> = (0..n).collect();
    by_x.sort_by(|&a, &b| sorted[a].bbox.x.total_cmp(&sorted[b].bbox.x).then(a.cmp(&b)));
    for (pos, &i) in by_x.iter().enumerate() {
        let bi = &sorted[i].bbox;
        for &j in &by_x[pos + 1..] {
            let bj = &sorted[j].bbox;
            if bj.x >= bi.x2() {
                break;
            }
            if iou(bi, bj) >= iou_threshold {
                ds.union(i, j);
            }
        }
    }
    // `sorted` is in score order, so the first member seen per root is the
    // component's representative.
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for i in 0..n {
        let r = ds.find(i);
        if !seen[r] {
            seen[r] = true;
            out.push(sorted[i].clone());
        }
    }
    Ok(out)
}
