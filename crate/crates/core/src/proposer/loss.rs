//! Detection loss: BCE classification against task-aligned targets, CIoU box
//! regression and distribution focal loss, with gradients with respect to the
//! raw head logits.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

use super::assign::{assign, Assignment, TalConfig, Xyxy};
use super::config::ProposerConfig;
use super::head::{sigmoid, FlatPredictions};

const EPS: f64 = 1e-7;

/// Complete IoU of two `(x1, y1, x2, y2)` boxes.
pub fn ciou(a: &Xyxy, b: &Xyxy) -> f64 {
    ciou_grad(a, b).0
}

/// CIoU and its gradient with respect to the first box. The aspect-ratio
/// trade-off weight is treated as a constant.
pub fn ciou_grad(a: &Xyxy, b: &Xyxy) -> (f64, [f64; 4]) {
    let (v, g, _) = ciou_impl(a, b, None);
    (v, g)
}

/// Returns the value, the gradient and the trade-off weight used; a
/// `fixed_alpha` replaces the weight computed from the boxes.
fn ciou_impl(a: &Xyxy, b: &Xyxy, fixed_alpha: Option<f64>) -> (f64, [f64; 4], f64) {
    let [x1, y1, x2, y2] = *a;
    let [bx1, by1, bx2, by2] = *b;
    let (w1, h1) = (x2 - x1, y2 - y1 + EPS);
    let (w2, h2) = (bx2 - bx1, by2 - by1 + EPS);

    let iw = x2.min(bx2) - x1.max(bx1);
    let ih = y2.min(by2) - y1.max(by1);
    let (inter, di) = if iw > 0.0 && ih > 0.0 {
        let dw = [-f64::from(x1 > bx1), 0.0, f64::from(x2 < bx2), 0.0];
        let dh = [0.0, -f64::from(y1 > by1), 0.0, f64::from(y2 < by2)];
        (iw * ih, [dw[0] * ih, dh[1] * iw, dw[2] * ih, dh[3] * iw])
    } else {
        (0.0, [0.0; 4])
    };
    let union = w1 * h1 + w2 * h2 - inter + EPS;
    let du = [-h1 - di[0], -w1 - di[1], h1 - di[2], w1 - di[3]];
    let iou = inter / union;
    let diou = [0, 1, 2, 3].map(|i| (di[i] * union - inter * du[i]) / (union * union));

    let cw = x2.max(bx2) - x1.min(bx1);
    let ch = y2.max(by2) - y1.min(by1);
    let c2 = cw * cw + ch * ch + EPS;
    let dc2 = [
        -2.0 * cw * f64::from(x1 <= bx1),
        -2.0 * ch * f64::from(y1 <= by1),
        2.0 * cw * f64::from(x2 >= bx2),
        2.0 * ch * f64::from(y2 >= by2),
    ];
    let dx = bx1 + bx2 - x1 - x2;
    let dy = by1 + by2 - y1 - y2;
    let rho2 = (dx * dx + dy * dy) / 4.0;
    let drho2 = [-dx / 2.0, -dy / 2.0, -dx / 2.0, -dy / 2.0];
    let dterm = [0, 1, 2, 3].map(|i| (drho2[i] * c2 - rho2 * dc2[i]) / (c2 * c2));

    let k = 4.0 / (PI * PI);
    let diff = (w2 / h2).atan() - (w1 / h1).atan();
    let v = k * diff * diff;
    let alpha = fixed_alpha.unwrap_or_else(|| v / (v - iou + (1.0 + EPS)));
    // d atan(w1/h1) with respect to w1 and h1.
    let r = w1 * w1 + h1 * h1;
    let (dt_dw, dt_dh) = (h1 / r, -w1 / r);
    let dv_dt = -2.0 * k * diff;
    let dv = [-dv_dt * dt_dw, -dv_dt * dt_dh, dv_dt * dt_dw, dv_dt * dt_dh];

    let value = iou - (rho2 / c2 + alpha * v);
    let grad = [0, 1, 2, 3].map(|i| diou[i] - dterm[i] - alpha * dv[i]);
    (value, grad, alpha)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub num_foreground: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.box_loss + self.cls_loss + self.dfl_loss
    }
}

/// Loss value and gradients laid out like [`FlatPredictions`].
#[derive(Clone, Debug)]
pub struct DetectionLoss {
    pub parts: LossParts,
    pub box_grad: Vec<f32>,
    pub cls_grad: Vec<f32>,
}

fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Ground-truth corners and the anchor assignment of one image.
pub type ImageAssignment = (Vec<Xyxy>, Assignment);

/// Assigns every image of the batch. `targets[b]` holds the ground-truth
/// boxes of image `b` in pixels, all of class 0.
pub fn assign_batch(pred: &FlatPredictions, targets: &[Vec<BBox>], cfg: &ProposerConfig) -> Vec<ImageAssignment> {
    let (na, nc) = (pred.num_anchors(), pred.num_classes);
    let tal = TalConfig { topk: cfg.tal_topk, alpha: cfg.tal_alpha, beta: cfg.tal_beta };
    let anchors: Vec<(f64, f64)> = pred.anchors.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    (0..pred.batch)
        .map(|b| {
            let gts: Vec<Xyxy> = targets.get(b).map_or(&[][..], |v| v).iter().map(|g| [g.x, g.y, g.x2(), g.y2()]).collect();
            let scores: Vec<f64> = (0..na).map(|a| sigmoid(pred.cls_logits[(b * na + a) * nc] as f64)).collect();
            let boxes: Vec<Xyxy> = (0..na).map(|a| pred.decode(b, a)).collect();
            let asg = assign(&tal, &anchors, &scores, &boxes, &gts);
            (gts, asg)
        })
        .collect()
}

/// Assigns, then computes the gain-weighted loss of a batch.
pub fn detection_loss(pred: &FlatPredictions, targets: &[Vec<BBox>], cfg: &ProposerConfig) -> DetectionLoss {
    loss_with_assignment(pred, &assign_batch(pred, targets, cfg), cfg)
}

/// Loss for a fixed assignment; the alignment targets are constants.
pub fn loss_with_assignment(pred: &FlatPredictions, assignments: &[ImageAssignment], cfg: &ProposerConfig) -> DetectionLoss {
    let (na, r, nc) = (pred.num_anchors(), pred.reg_max, pred.num_classes);
    let anchors: Vec<(f64, f64)> = pred.anchors.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let target_sum = assignments.iter().map(|(_, a)| a.target_score.iter().sum::<f64>()).sum::<f64>().max(1.0);

    let mut parts = LossParts::default();
    let mut box_grad = vec![0.0f32; pred.box_logits.len()];
    let mut cls_grad = vec![0.0f32; pred.cls_logits.len()];
    for (b, (gts, asg)) in assignments.iter().enumerate() {
        for a in 0..na {
            let t = asg.target_score[a];
            for k in 0..nc {
                let i = (b * na + a) * nc + k;
                let x = pred.cls_logits[i] as f64;
                let tk = if k == 0 { t } else { 0.0 };
                parts.cls_loss += bce_with_logits(x, tk) / target_sum * cfg.cls_gain;
                cls_grad[i] = ((sigmoid(x) - tk) / target_sum * cfg.cls_gain) as f32;
            }
            let Some(j) = asg.gt_index[a] else { continue };
            parts.num_foreground += 1;
            let s = pred.strides[a] as f64;
            let (ax, ay) = (anchors[a].0 / s, anchors[a].1 / s);
            let probs: Vec<Vec<f64>> = (0..4).map(|side| pred.side_probs(b, a, side)).collect();
            let dist: Vec<f64> = probs.iter().map(|p| p.iter().enumerate().map(|(i, v)| i as f64 * v).sum()).collect();
            let pb = [ax - dist[0], ay - dist[1], ax + dist[2], ay + dist[3]];
            let g = gts[j].map(|v| v / s);

            let (c, dc) = ciou_grad(&pb, &g);
            parts.box_loss += (1.0 - c) * t / target_sum * cfg.box_gain;
            // Loss gradient with respect to the pred corners, then to the side distances.
            let dpb = dc.map(|v| -v * t / target_sum * cfg.box_gain);
            let ddist = [-dpb[0], -dpb[1], dpb[2], dpb[3]];

            let ltrb = [ax - g[0], ay - g[1], g[2] - ax, g[3] - ay].map(|v| v.clamp(0.0, r as f64 - 1.0 - 0.01));
            for side in 0..4 {
                let p = &probs[side];
                let tl = ltrb[side].floor() as usize;
                let wl = tl as f64 + 1.0 - ltrb[side];
                let wr = 1.0 - wl;
                parts.dfl_loss += -(wl * p[tl].max(1e-300).ln() + wr * p[tl + 1].max(1e-300).ln()) / 4.0 * t / target_sum * cfg.dfl_gain;
                let base = ((b * na + a) * 4 + side) * r;
                let dfl_scale = t / target_sum * cfg.dfl_gain / 4.0;
                for i in 0..r {
                    let onehot = if i == tl { wl } else if i == tl + 1 { wr } else { 0.0 };
                    let g_box = ddist[side] * p[i] * (i as f64 - dist[side]);
                    box_grad[base + i] = (g_box + (p[i] - onehot) * dfl_scale) as f32;
                }
            }
        }
    }
    DetectionLoss { parts, box_grad, cls_grad }
}
