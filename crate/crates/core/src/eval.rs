//! Greedy detection-to-ground-truth matching and precision/recall/F1.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, score_order, BBox, Detection};

/// Serialized as its textual form (`center:30`, `iou:0.5:50`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MatchRule {
    /// Detection center within this many pixels of the ground-truth center.
    Center(f64),
    /// IoU of at least `threshold` against a `gt_box`-sized box on the center.
    Iou { threshold: f64, gt_box: f64 },
}

impl Default for MatchRule {
    fn default() -> Self {
        MatchRule::Center(30.0)
    }
}

impl FromStr for MatchRule {
    type Err = Error;

    /// `center:<px>` or `iou:<threshold>[:<box>]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("bad number {v:?} in match rule {s:?}")));
        match parts.as_slice() {
            ["center", d] => Ok(MatchRule::Center(num(d)?)),
            ["iou", t] => Ok(MatchRule::Iou { threshold: num(t)?, gt_box: 50.0 }),
            ["iou", t, b] => Ok(MatchRule::Iou { threshold: num(t)?, gt_box: num(b)? }),
            _ => Err(Error::Config(format!("unknown match rule {s:?}; expected center:<px> or iou:<t>"))),
        }
    }
}

impl TryFrom<String> for MatchRule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MatchRule> for String {
    fn from(r: MatchRule) -> String {
        r.to_string()
    }
}

impl fmt::Display for MatchRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchRule::Center(d) => write!(f, "center:{d}"),
            MatchRule::Iou { threshold, gt_box } => write!(f, "iou:{threshold}:{gt_box}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection id, ground-truth index)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching. Detections are visited in score order and each
/// takes the closest unmatched ground truth that satisfies `rule`.
pub fn match_detections(dets: &[Detection], gts: &[(f64, f64)], rule: MatchRule) -> MatchResult {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| score_order(a, b));
    let gt_boxes: Vec<BBox> = match rule {
        MatchRule::Iou { gt_box, .. } => gts.iter().map(|&(x, y)| BBox { x: x - gt_box / 2.0, y: y - gt_box / 2.0, w: gt_box, h: gt_box }).collect(),
        MatchRule::Center(_) => Vec::new(),
    };
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for d in order {
        let (dx, dy) = d.bbox.center();
        let mut best: Option<(usize, f64)> = None;
        for (j, &(gx, gy)) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            // Lower cost is better for both rules.
            let cost = match rule {
                MatchRule::Center(r) => {
                    let dist = ((dx - gx).powi(2) + (dy - gy).powi(2)).sqrt();
                    if dist > r {
                        continue;
                    }
                    dist
                }
                MatchRule::Iou { threshold, .. } => {
                    let v = iou(&d.bbox, &gt_boxes[j]);
                    if v < threshold {
                        continue;
                    }
                    -v
                }
            };
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((j, cost));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            pairs.push((d.id, j));
        }
    }
    let tp = pairs.len();
    MatchResult { tp, fp: dets.len() - tp, fn_: gts.len() - tp, pairs }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 from raw counts. With no detections and no ground
/// truth all three are 1; an empty side with the other non-empty gives 0.
pub fn metrics(tp: usize, fp: usize, fn_: usize) -> Metrics {
    if tp + fp + fn_ == 0 {
        return Metrics { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Metrics { precision, recall, f1 }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<(String, MatchResult)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EvalReport {
    /// Micro-averaged: counts are summed over images before computing metrics.
    pub fn from_results(per_image: Vec<(String, MatchResult)>) -> Self {
        let (tp, fp, fn_) = per_image.iter().fold((0, 0, 0), |(a, b, c), (_, m)| (a + m.tp, b + m.fp, c + m.fn_));
        Self { per_image, tp, fp, fn_ }
    }

    pub fn metrics(&self) -> Metrics {
        metrics(self.tp, self.fp, self.fn_)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image_id", "tp", "fp", "fn", "p", "r", "f1"])?;
        let mut row = |id: &str, tp: usize, fp: usize, fn_: usize| -> Result<()> {
            let m = metrics(tp, fp, fn_);
            w.write_record([
                id.to_string(),
                tp.to_string(),
                fp.to_string(),
                fn_.to_string(),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.f1),
            ])?;
            Ok(())
        };
        for (id, m) in &self.per_image {
            row(id, m.tp, m.fp, m.fn_)?;
        }
        row("ALL", self.tp, self.fp, self.fn_)?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Plain-text table with the columns Method, TP, FP, FN, P, R, F1.
    pub fn table(&self, method: &str) -> String {
        let m = self.metrics();
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}", "Method", "TP", "FP", "FN", "P", "R", "F1");
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>8} {:>8} {:>6.3} {:>6.3} {:>6.3}",
            method, self.tp, self.fp, self.fn_, m.precision, m.recall, m.f1
        );
        s
    }
}

/// Matches every image and aggregates.
pub fn evaluate<'a>(
    images: impl IntoIterator<Item = (&'a str, &'a [Detection], &'a [(f64, f64)])>,
    rule: MatchRule,
) -> EvalReport {
    EvalReport::from_results(images.into_iter().map(|(id, d, g)| (id.to_string(), match_detections(d, g, rule))).collect())
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, counting ties as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}
