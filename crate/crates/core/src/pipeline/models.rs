use std::collections::HashMap;

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, Frame};
use crate::image::Image;
use crate::proposer::Proposer;
use crate::tiling::PatchSpec;

/// First stage: candidate boxes on one patch, in that patch's frame.
pub trait CandidateProposer: Sync {
    /// Patch side the model requires, if it is fixed.
    fn patch_size(&self) -> Option<usize>;

    fn propose(&self, image_id: &str, patch: &PatchSpec, pixels: &Image, conf: f64, nms_iou: f64) -> Result<Vec<Detection>>;
}

/// Second stage: mitosis probability of each candidate crop.
pub trait CandidateClassifier: Sync {
    fn crop_size(&self) -> usize;

    fn crop_margin(&self) -> f64;

    fn score(&self, crops: &[&Image]) -> Result<Vec<f64>>;
}

impl CandidateProposer for Proposer {
    fn patch_size(&self) -> Option<usize> {
        Some(self.config().input_size)
    }

    fn propose(&self, _image_id: &str, patch: &PatchSpec, pixels: &Image, conf: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let n = self.config().input_size;
        if pixels.width() != n || pixels.height() != n {
            return Err(Error::Shape(format!("proposer expects {n}x{n} patches, got {}x{}", pixels.width(), pixels.height())));
        }
        let pred = self.predict(&[pixels])?;
        pred.detections(0, conf, nms_iou, self.config().max_detections, Frame::Patch(patch.id))
    }
}

impl CandidateClassifier for Classifier {
    fn crop_size(&self) -> usize {
        self.config().input_size
    }

    fn crop_margin(&self) -> f64 {
        self.config().crop_margin
    }

    fn score(&self, crops: &[&Image]) -> Result<Vec<f64>> {
        self.score_crops(crops)
    }
}

/// Proposes a fixed-size box with score 1 at every known object center that
/// lies in the patch. Stands in for a perfect detector in tests and dry runs.
#[derive(Clone, Debug, Default)]
pub struct OracleProposer {
    pub centers: HashMap<String, Vec<(f64, f64)>>,
    pub box_size: f64,
    /// Pretend the model needs this patch size.
    pub required_patch: Option<usize>,
}

impl OracleProposer {
    pub fn new(centers: HashMap<String, Vec<(f64, f64)>>, box_size: f64) -> Self {
        Self { centers, box_size, required_patch: None }
    }
}

impl CandidateProposer for OracleProposer {
    fn patch_size(&self) -> Option<usize> {
        self.required_patch
    }

    fn propose(&self, image_id: &str, patch: &PatchSpec, _pixels: &Image, _conf: f64, _nms_iou: f64) -> Result<Vec<Detection>> {
        let Some(centers) = self.centers.get(image_id) else { return Ok(Vec::new()) };
        let r = patch.interior();
        let (ox, oy) = (patch.origin_x as f64, patch.origin_y as f64);
        centers
            .iter()
            .filter(|&&(x, y)| x >= r.x && x < r.x2() && y >= r.y && y < r.y2())
            .enumerate()
            .map(|(i, &(x, y))| Ok(Detection::new(BBox::centered(x - ox, y - oy, self.box_size)?, 1.0, Frame::Patch(patch.id))?.with_id(i)))
            .collect()
    }
}

/// Scores every crop with the same value.
#[derive(Clone, Copy, Debug)]
pub struct ConstantClassifier {
    pub score: f64,
    pub crop_size: usize,
}

impl ConstantClassifier {
    pub fn new(score: f64) -> Self {
        Self { score, crop_size: 64 }
    }
}

impl CandidateClassifier for ConstantClassifier {
    fn crop_size(&self) -> usize {
        self.crop_size
    }

    fn crop_margin(&self) -> f64 {
        0.0
    }

    fn score(&self, crops: &[&Image]) -> Result<Vec<f64>> {
        Ok(vec![self.score; crops.len()])
    }
}
