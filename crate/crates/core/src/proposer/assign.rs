//! Task-aligned assignment of anchors to ground-truth boxes.

use super::loss::ciou;

/// Boxes are `(x1, y1, x2, y2)`.
pub type Xyxy = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TalConfig {
    pub topk: usize,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Index of the assigned ground truth per anchor, if foreground.
    pub gt_index: Vec<Option<usize>>,
    /// Normalized alignment target per anchor (0 for background).
    pub target_score: Vec<f64>,
}

impl Assignment {
    pub fn num_foreground(&self) -> usize {
        self.gt_index.iter().filter(|g| g.is_some()).count()
    }
}

const EPS: f64 = 1e-9;

/// Assigns anchors of one image. `scores[a]` is the predicted probability of
/// the ground-truth class at anchor `a`, `pred[a]` its decoded box.
pub fn assign(cfg: &TalConfig, anchors: &[(f64, f64)], scores: &[f64], pred: &[Xyxy], gts: &[Xyxy]) -> Assignment {
    let n = anchors.len();
    let mut out = Assignment { gt_index: vec![None; n], target_score: vec![0.0; n] };
    if gts.is_empty() {
        return out;
    }
    let m = gts.len();
    let mut overlaps = vec![0.0; m * n];
    let mut align = vec![0.0; m * n];
    let mut pos = vec![false; m * n];
    for (j, g) in gts.iter().enumerate() {
        let mut cand: Vec<(usize, f64)> = Vec::new();
        for (a, &(x, y)) in anchors.iter().enumerate() {
            let inside = (x - g[0]).min(y - g[1]).min(g[2] - x).min(g[3] - y) > EPS;
            if !inside {
                continue;
            }
            let o = ciou(&pred[a], g).max(0.0);
            overlaps[j * n + a] = o;
            let s = scores[a].max(0.0);
            let metric = s.powf(cfg.alpha) * o.powf(cfg.beta);
            align[j * n + a] = metric;
            cand.push((a, metric));
        }
        // Stable order: metric descending, anchor index ascending.
        cand.sort_by(|p, q| q.1.total_cmp(&p.1).then(p.0.cmp(&q.0)));
        for &(a, _) in cand.iter().take(cfg.topk) {
            pos[j * n + a] = true;
        }
    }
    for a in 0..n {
        let hits: Vec<usize> = (0..m).filter(|&j| pos[j * n + a]).collect();
        out.gt_index[a] = match hits.len() {
            0 => None,
            1 => Some(hits[0]),
            // Conflicts go to the ground truth with the highest overlap.
            _ => (0..m).max_by(|&p, &q| overlaps[p * n + a].total_cmp(&overlaps[q * n + a]).then(q.cmp(&p))),
        };
    }
    let mut max_align = vec![0.0f64; m];
    let mut max_overlap = vec![0.0f64; m];
    for a in 0..n {
        if let Some(j) = out.gt_index[a] {
            max_align[j] = max_align[j].max(align[j * n + a]);
            max_overlap[j] = max_overlap[j].max(overlaps[j * n + a]);
        }
    }
    for a in 0..n {
        if let Some(j) = out.gt_index[a] {
            out.target_score[a] = align[j * n + a] * max_overlap[j] / (max_align[j] + EPS);
        }
    }
    out
}
