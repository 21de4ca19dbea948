use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, Frame};
use crate::image::Image;

use super::StageOutputs;

pub const OVERLAY_GREEN: [f32; 3] = [0.0, 1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Proposal,
    Final,
}

/// One line of a detection file: `image_id,x,y,w,h,score,stage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub stage: Stage,
}

impl DetectionRow {
    pub fn new(image_id: &str, d: &Detection, stage: Stage) -> Self {
        Self { image_id: image_id.to_string(), x: d.bbox.x, y: d.bbox.y, w: d.bbox.w, h: d.bbox.h, score: d.score, stage }
    }

    pub fn to_detection(&self, id: usize) -> Result<Detection> {
        Ok(Detection::new(BBox::new(self.x, self.y, self.w, self.h)?, self.score, Frame::Global)?.with_id(id))
    }
}

/// Writes the proposals and final detections of one image.
pub fn write_detections<W: Write>(image_id: &str, out: &StageOutputs, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for d in &out.proposals {
        w.serialize(DetectionRow::new(image_id, d, Stage::Proposal))?;
    }
    for d in &out.detections {
        w.serialize(DetectionRow::new(image_id, d, Stage::Final))?;
    }
    if out.proposals.is_empty() && out.detections.is_empty() {
        w.write_record(["image_id", "x", "y", "w", "h", "score", "stage"])?;
    }
    w.flush().map_err(|e| Error::io("<detections>", e))?;
    Ok(())
}

pub fn read_detections<R: Read>(r: R) -> Result<Vec<DetectionRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["image_id", "x", "y", "w", "h", "score", "stage"] {
        return Err(Error::Data(format!("detection file header {header:?}, expected image_id,x,y,w,h,score,stage")));
    }
    rdr.deserialize().enumerate().map(|(i, row)| row.map_err(|e| Error::Data(format!("detection row {}: {e}", i + 2)))).collect()
}

/// Copy of `image` with a one-pixel outline around every detection.
pub fn render_overlay(image: &Image, dets: &[Detection], color: [f32; 3]) -> Image {
    let mut out = image.clone();
    for d in dets {
        out.draw_rect(&d.bbox, color);
    }
    out
}
