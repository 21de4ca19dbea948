//! Anchor-free head outputs flattened over levels, distribution decoding and
//! post-processing into detections.

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, Detection, Frame};
use crate::tensor::Tensor;

/// Head outputs of one batch, flattened over the three levels.
///
/// Anchor `a` of image `b` has box logits at
/// `box_logits[((b * A + a) * 4 + side) * R + bin]` (sides left, top, right,
/// bottom) and class logits at `cls_logits[(b * A + a) * nc + class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatPredictions {
    pub batch: usize,
    pub num_classes: usize,
    pub reg_max: usize,
    /// Anchor centers in pixels.
    pub anchors: Vec<(f32, f32)>,
    pub strides: Vec<f32>,
    /// `(stride, height, width)` of each level, in order.
    pub levels: Vec<(usize, usize, usize)>,
    pub box_logits: Vec<f32>,
    pub cls_logits: Vec<f32>,
}

impl FlatPredictions {
    /// Gathers `(box, cls)` tensors of shape `(B, 4R, H, W)` and `(B, nc, H, W)`.
    pub fn from_levels(levels: &[(usize, &Tensor<f32>, &Tensor<f32>)], reg_max: usize) -> Result<Self> {
        let Some((_, b0, c0)) = levels.first() else {
            return Err(Error::InvalidInput("no head levels".into()));
        };
        let batch = b0.shape()[0];
        let nc = c0.shape()[1];
        let mut anchors = Vec::new();
        let mut strides = Vec::new();
        let mut shapes = Vec::new();
        for &(s, bt, ct) in levels {
            let (b, c, h, w) = bt.dims4()?;
            let (cb, cc, ch, cw) = ct.dims4()?;
            if b != batch || c != 4 * reg_max || (cb, cc, ch, cw) != (batch, nc, h, w) {
                return Err(Error::Shape(format!("head level shapes {:?} / {:?}", bt.shape(), ct.shape())));
            }
            for y in 0..h {
                for x in 0..w {
                    anchors.push(((x as f32 + 0.5) * s as f32, (y as f32 + 0.5) * s as f32));
                    strides.push(s as f32);
                }
            }
            shapes.push((s, h, w));
        }
        let a_total = anchors.len();
        let mut box_logits = vec![0.0; batch * a_total * 4 * reg_max];
        let mut cls_logits = vec![0.0; batch * a_total * nc];
        for b in 0..batch {
            let mut a0 = 0;
            for (&(_, bt, ct), &(_, h, w)) in levels.iter().zip(&shapes) {
                let hw = h * w;
                let (bd, cd) = (bt.data(), ct.data());
                for ch in 0..4 * reg_max {
                    let src = &bd[(b * 4 * reg_max + ch) * hw..][..hw];
                    for (p, &v) in src.iter().enumerate() {
                        box_logits[(b * a_total + a0 + p) * 4 * reg_max + ch] = v;
                    }
                }
                for k in 0..nc {
                    let src = &cd[(b * nc + k) * hw..][..hw];
                    for (p, &v) in src.iter().enumerate() {
                        cls_logits[(b * a_total + a0 + p) * nc + k] = v;
                    }
                }
                a0 += hw;
            }
        }
        Ok(Self { batch, num_classes: nc, reg_max, anchors, strides, levels: shapes, box_logits, cls_logits })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Scatters flat gradients back into per-level `(box, cls)` tensors.
    pub fn unflatten(&self, box_grad: &[f32], cls_grad: &[f32]) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        let (a_total, r4, nc) = (self.num_anchors(), 4 * self.reg_max, self.num_classes);
        if box_grad.len() != self.box_logits.len() || cls_grad.len() != self.cls_logits.len() {
            return Err(Error::Shape("gradient length does not match predictions".into()));
        }
        let mut out = Vec::with_capacity(self.levels.len());
        let mut a0 = 0;
        for &(_, h, w) in &self.levels {
            let hw = h * w;
            let mut bt = Tensor::zeros(&[self.batch, r4, h, w]);
            let mut ct = Tensor::zeros(&[self.batch, nc, h, w]);
            for b in 0..self.batch {
                for p in 0..hw {
                    let a = b * a_total + a0 + p;
                    for ch in 0..r4 {
                        bt.data_mut()[(b * r4 + ch) * hw + p] = box_grad[a * r4 + ch];
                    }
                    for k in 0..nc {
                        ct.data_mut()[(b * nc + k) * hw + p] = cls_grad[a * nc + k];
                    }
                }
            }
            out.push((bt, ct));
            a0 += hw;
        }
        Ok(out)
    }

    /// Softmax over bins of one side's logits.
    pub fn side_probs(&self, b: usize, a: usize, side: usize) -> Vec<f64> {
        let r = self.reg_max;
        let l = &self.box_logits[((b * self.num_anchors() + a) * 4 + side) * r..][..r];
        softmax(l)
    }

    /// Expected `(left, top, right, bottom)` distances in stride units.
    pub fn distances(&self, b: usize, a: usize) -> [f64; 4] {
        [0, 1, 2, 3].map(|s| self.side_probs(b, a, s).iter().enumerate().map(|(i, p)| i as f64 * p).sum())
    }

    /// Decoded `(x1, y1, x2, y2)` in pixels.
    pub fn decode(&self, b: usize, a: usize) -> [f64; 4] {
        let d = self.distances(b, a);
        let (ax, ay) = self.anchors[a];
        let s = self.strides[a] as f64;
        let (ax, ay) = (ax as f64, ay as f64);
        [ax - d[0] * s, ay - d[1] * s, ax + d[2] * s, ay + d[3] * s]
    }

    /// Sigmoid class scores of one anchor.
    pub fn scores(&self, b: usize, a: usize) -> Vec<f64> {
        let nc = self.num_classes;
        self.cls_logits[(b * self.num_anchors() + a) * nc..][..nc].iter().map(|&v| sigmoid(v as f64)).collect()
    }

    /// Confidence filter, NMS and top-`max_det` cap for image `b`, in the
    /// patch frame `frame`.
    pub fn detections(&self, b: usize, conf: f64, nms_iou: f64, max_det: usize, frame: Frame) -> Result<Vec<Detection>> {
        let mut cands = Vec::new();
        for a in 0..self.num_anchors() {
            let scores = self.scores(b, a);
            let (label, score) = scores.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |m, (i, s)| if s > m.1 { (i, s) } else { m });
            if score <= conf {
                continue;
            }
            let [x1, y1, x2, y2] = self.decode(b, a);
            // A degenerate distribution can collapse a side to zero width.
            let Ok(bbox) = BBox::from_corners(x1, y1, x2.max(x1 + 1e-3), y2.max(y1 + 1e-3)) else { continue };
            let mut d = Detection::new(bbox, score.min(1.0), frame)?.with_id(a);
            d.label = label as u32;
            cands.push(d);
        }
        let mut kept = nms(&cands, nms_iou);
        kept.truncate(max_det);
        Ok(kept)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(l: &[f32]) -> Vec<f64> {
    let m = l.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = l.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_level(reg_max: usize, box_fill: f32, cls_fill: f32) -> FlatPredictions {
        let bt = Tensor::full(&[1, 4 * reg_max, 2, 2], box_fill);
        let ct = Tensor::full(&[1, 1, 2, 2], cls_fill);
        FlatPredictions::from_levels(&[(8, &bt, &ct)], reg_max).unwrap()
    }

    #[test]
    fn uniform_distribution_decodes_to_mean_bin() {
        let p = single_level(16, 0.0, 0.0);
        assert_eq!(p.anchors[3], (12.0, 12.0));
        let d = p.distances(0, 0);
        assert!(d.iter().all(|&v| (v - 7.5).abs() < 1e-9));
        let b = p.decode(0, 0);
        assert!((b[0] - (4.0 - 60.0)).abs() < 1e-9 && (b[2] - 64.0).abs() < 1e-9);
    }

    #[test]
    fn peaked_distribution_decodes_to_bin() {
        let r = 4;
        let mut bt = Tensor::full(&[1, 4 * r, 1, 1], -50.0f32);
        for side in 0..4 {
            bt.data_mut()[side * r + 2] = 50.0;
        }
        let ct = Tensor::full(&[1, 1, 1, 1], 3.0f32);
        let p = FlatPredictions::from_levels(&[(16, &bt, &ct)], r).unwrap();
        let b = p.decode(0, 0);
        assert!((b[0] - (8.0 - 32.0)).abs() < 1e-6 && (b[3] - 40.0).abs() < 1e-6);
        let dets = p.detections(0, 0.2, 0.3, 300, Frame::Patch(0)).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - sigmoid(3.0)).abs() < 1e-9);
    }

    #[test]
    fn confidence_filter_and_cap() {
        let p = single_level(4, 0.0, -5.0);
        assert!(p.detections(0, 0.2, 0.3, 300, Frame::Patch(0)).unwrap().is_empty());
        // Identical boxes at different anchors overlap heavily, so NMS and the cap both bite.
        let p = single_level(4, 0.0, 2.0);
        assert_eq!(p.detections(0, 0.2, 0.99, 2, Frame::Patch(0)).unwrap().len(), 2);
    }

    #[test]
    fn unflatten_inverts_flatten() {
        let bt = Tensor::from_fn(&[2, 8, 2, 3], |i| i as f32);
        let ct = Tensor::from_fn(&[2, 1, 2, 3], |i| -(i as f32));
        let bt2 = Tensor::from_fn(&[2, 8, 1, 2], |i| 100.0 + i as f32);
        let ct2 = Tensor::from_fn(&[2, 1, 1, 2], |i| 50.0 + i as f32);
        let p = FlatPredictions::from_levels(&[(8, &bt, &ct), (16, &bt2, &ct2)], 2).unwrap();
        let back = p.unflatten(&p.box_logits, &p.cls_logits).unwrap();
        assert_eq!(back[0], (bt, ct));
        assert_eq!(back[1], (bt2, ct2));
    }
}
