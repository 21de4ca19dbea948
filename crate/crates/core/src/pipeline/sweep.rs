use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{match_detections, metrics, EvalReport, MatchRule};

use super::{apply_thresholds, ProposalCache, Thresholds};

pub type SweepCell = Thresholds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub conf: f64,
    pub classifier: f64,
    pub merge_iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Re-evaluates cached proposals under every threshold combination in `grid`.
/// Images without ground truth count as having no objects.
pub fn sweep_thresholds(caches: &[ProposalCache], grid: &[SweepCell], gts: &HashMap<String, Vec<(f64, f64)>>, rule: MatchRule) -> Result<Vec<SweepRow>> {
    if caches.is_empty() {
        return Err(Error::InvalidInput("threshold sweep needs at least one proposal cache".into()));
    }
    let none = Vec::new();
    grid.iter()
        .map(|&cell| {
            let per_image = caches
                .iter()
                .map(|c| {
                    let out = apply_thresholds(c, cell, 0)?;
                    let gt = gts.get(&c.image_id).unwrap_or(&none);
                    Ok((c.image_id.clone(), match_detections(&out.detections, gt, rule)))
                })
                .collect::<Result<Vec<_>>>()?;
            let r = EvalReport::from_results(per_image);
            let m = metrics(r.tp, r.fp, r.fn_);
            Ok(SweepRow {
                conf: cell.conf,
                classifier: cell.classifier,
                merge_iou: cell.merge_iou,
                tp: r.tp,
                fp: r.fp,
                fn_: r.fn_,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["conf", "classifier", "merge_iou", "tp", "fp", "fn", "p", "r", "f1"])?;
    for r in rows {
        w.write_record([
            r.conf.to_string(),
            r.classifier.to_string(),
            r.merge_iou.to_string(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.f1),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<sweep>", e))?;
    Ok(())
}
