//! Two-stage whole-image inference: tile, propose, filter with the classifier,
//! lift to the global frame and merge duplicates across patches.

mod models;
mod output;
mod sweep;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{merge_cross_patch, score_order, to_global, Detection, Frame};
use crate::image::{Image, ImageSource};
use crate::tiling::{make_grid, PatchSpec};

pub use models::{CandidateClassifier, CandidateProposer, ConstantClassifier, OracleProposer};
pub use output::{read_detections, render_overlay, write_detections, DetectionRow, Stage, OVERLAY_GREEN};
pub use sweep::{sweep_thresholds, write_sweep_csv, SweepCell, SweepRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub overlap: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub classifier_threshold: f64,
    pub merge_iou: f64,
    /// Candidate crops scored per classifier call.
    pub classifier_batch: usize,
    /// Worker threads for patch processing; 0 uses the global pool.
    pub workers: usize,
    /// When set, proposals are generated down to this confidence (or the
    /// configured threshold if lower) and kept for threshold sweeps.
    pub cache_conf: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: 512,
            overlap: 0.2,
            conf_threshold: 0.2,
            nms_iou: 0.3,
            classifier_threshold: 0.5,
            merge_iou: 0.5,
            classifier_batch: 64,
            workers: 0,
            cache_conf: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        unit("conf_threshold", self.conf_threshold)?;
        unit("nms_iou", self.nms_iou)?;
        unit("classifier_threshold", self.classifier_threshold)?;
        unit("merge_iou", self.merge_iou)?;
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap = {} must lie in [0, 1)", self.overlap)));
        }
        if self.patch_size == 0 || self.classifier_batch == 0 {
            return Err(Error::Config("patch_size and classifier_batch must be positive".into()));
        }
        if let Some(c) = self.cache_conf {
            if !(0.0..1.0).contains(&c) {
                return Err(Error::Config(format!("cache_conf = {c} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Confidence down to which proposals are generated.
    pub fn generation_conf(&self) -> f64 {
        self.cache_conf.map_or(self.conf_threshold, |c| c.min(self.conf_threshold))
    }
}

/// Per-stage counts of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub patches: usize,
    pub proposals: usize,
    pub rejected: usize,
    pub survivors: usize,
    pub final_detections: usize,
}

/// A lifted proposal together with its stage-2 score, if a classifier ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedProposal {
    pub detection: Detection,
    pub class_score: Option<f64>,
}

/// Every proposal of one image down to `conf_floor`, with classifier scores,
/// so that thresholds can be re-applied without running the models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalCache {
    pub image_id: String,
    pub conf_floor: f64,
    pub entries: Vec<CachedProposal>,
}

impl ProposalCache {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Thresholds applied after proposal generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Proposals are kept when their score is strictly above this.
    pub conf: f64,
    /// Candidates are rejected when their classifier score is below this.
    pub classifier: f64,
    pub merge_iou: f64,
}

impl From<&PipelineConfig> for Thresholds {
    fn from(c: &PipelineConfig) -> Self {
        Self { conf: c.conf_threshold, classifier: c.classifier_threshold, merge_iou: c.merge_iou }
    }
}

/// Output of every stage of one run, all in the global frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    pub proposals: Vec<Detection>,
    pub survivors: Vec<Detection>,
    /// Merged detections sorted by score, highest first.
    pub detections: Vec<Detection>,
    pub stats: RunStats,
}

/// Applies `t` to cached proposals. Survivors carry the classifier score when
/// one is present; otherwise the proposal score is kept.
pub fn apply_thresholds(cache: &ProposalCache, t: Thresholds, patches: usize) -> Result<StageOutputs> {
    if t.conf < cache.conf_floor {
        log::warn!("conf {} below cache floor {}; proposals between them were never generated", t.conf, cache.conf_floor);
    }
    let proposals: Vec<&CachedProposal> = cache.entries.iter().filter(|e| e.detection.score > t.conf).collect();
    let survivors: Vec<Detection> = proposals
        .iter()
        .filter_map(|e| match e.class_score {
            Some(s) if s < t.classifier => None,
            Some(s) => Some(Detection { score: s, ..e.detection.clone() }),
            None => Some(e.detection.clone()),
        })
        .collect();
    let mut detections = merge_cross_patch(&survivors, t.merge_iou)?;
    detections.sort_by(score_order);
    let stats = RunStats {
        patches,
        proposals: proposals.len(),
        rejected: proposals.len() - survivors.len(),
        survivors: survivors.len(),
        final_detections: detections.len(),
    };
    Ok(StageOutputs { proposals: proposals.into_iter().map(|e| e.detection.clone()).collect(), survivors, detections, stats })
}

#[derive(Clone, Debug)]
pub struct WsiResult {
    pub outputs: StageOutputs,
    pub cache: ProposalCache,
}

impl WsiResult {
    pub fn detections(&self) -> &[Detection] {
        &self.outputs.detections
    }

    pub fn stats(&self) -> RunStats {
        self.outputs.stats
    }
}

/// Proposals of one patch, in the global frame, each with its classifier score.
fn process_patch(
    source: &dyn ImageSource,
    patch: &PatchSpec,
    proposer: &dyn CandidateProposer,
    classifier: Option<&dyn CandidateClassifier>,
    cfg: &PipelineConfig,
) -> Result<Vec<CachedProposal>> {
    let pixels = source.read_region(patch.origin_x, patch.origin_y, patch.size, patch.size)?;
    let local = proposer.propose(source.id(), patch, &pixels, cfg.generation_conf(), cfg.nms_iou)?;
    if let Some(d) = local.iter().find(|d| d.frame != Frame::Patch(patch.id)) {
        return Err(Error::Frame(format!("proposer returned frame {:?} for patch {}", d.frame, patch.id)));
    }
    let scores = match classifier {
        Some(c) => {
            let crops: Vec<Image> = local.iter().map(|d| crate::classifier::extract_crop(&pixels, &d.bbox, c.crop_size(), c.crop_margin())).collect();
            let mut scores = Vec::with_capacity(crops.len());
            for chunk in crops.chunks(cfg.classifier_batch) {
                let refs: Vec<&Image> = chunk.iter().collect();
                let s = c.score(&refs)?;
                if s.len() != refs.len() {
                    return Err(Error::Shape(format!("classifier returned {} scores for {} crops", s.len(), refs.len())));
                }
                scores.extend(s.into_iter().map(Some));
            }
            scores
        }
        None => vec![None; local.len()],
    };
    local
        .iter()
        .zip(scores)
        .map(|(d, s)| {
            if s.is_some_and(|s| !(0.0..=1.0).contains(&s)) {
                return Err(Error::InvalidInput(format!("classifier score {s:?} outside [0, 1]")));
            }
            Ok(CachedProposal { detection: to_global(d, patch)?, class_score: s })
        })
        .collect()
}

/// Runs both stages over a whole image.
pub fn run_wsi(
    source: &dyn ImageSource,
    proposer: &dyn CandidateProposer,
    classifier: Option<&dyn CandidateClassifier>,
    cfg: &PipelineConfig,
) -> Result<WsiResult> {
    let (w, h) = source.dims();
    let grid = make_grid(w, h, cfg.patch_size, cfg.overlap)?;
    let order: Vec<usize> = (0..grid.len()).collect();
    run_patches(source, &grid.patches, &order, proposer, classifier, cfg)
}

/// [`run_wsi`] visiting the patches in the given order; the result does not
/// depend on it.
pub fn run_wsi_in_order(
    source: &dyn ImageSource,
    proposer: &dyn CandidateProposer,
    classifier: Option<&dyn CandidateClassifier>,
    cfg: &PipelineConfig,
    order: &[usize],
) -> Result<WsiResult> {
    let (w, h) = source.dims();
    let grid = make_grid(w, h, cfg.patch_size, cfg.overlap)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..grid.len()).collect::<Vec<_>>() {
        return Err(Error::InvalidInput(format!("patch order is not a permutation of 0..{}", grid.len())));
    }
    run_patches(source, &grid.patches, order, proposer, classifier, cfg)
}

fn run_patches(
    source: &dyn ImageSource,
    patches: &[PatchSpec],
    order: &[usize],
    proposer: &dyn CandidateProposer,
    classifier: Option<&dyn CandidateClassifier>,
    cfg: &PipelineConfig,
) -> Result<WsiResult> {
    cfg.validate()?;
    if let Some(n) = proposer.patch_size() {
        if n != cfg.patch_size {
            return Err(Error::Shape(format!("proposer expects {n} px patches, pipeline tiles at {}", cfg.patch_size)));
        }
    }
    let work = || -> Result<Vec<(usize, Vec<CachedProposal>)>> {
        order.par_iter().map(|&i| Ok((patches[i].id, process_patch(source, &patches[i], proposer, classifier, cfg)?))).collect()
    };
    let per_patch = if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(work)?
    } else {
        work()?
    };
    // Provenance ids follow patch order, whatever order the patches ran in.
    let by_patch: BTreeMap<usize, Vec<CachedProposal>> = per_patch.into_iter().collect();
    let mut entries = Vec::new();
    for (_, list) in by_patch {
        for mut e in list {
            e.detection.id = entries.len();
            entries.push(e);
        }
    }
    let cache = ProposalCache { image_id: source.id().to_string(), conf_floor: cfg.generation_conf(), entries };
    let outputs = apply_thresholds(&cache, Thresholds::from(cfg), patches.len())?;
    Ok(WsiResult { outputs, cache })
}

/// Checks that final detections come from survivors and survivors from
/// proposals, by provenance id, and that the counts agree.
pub fn subset_chain_holds(out: &StageOutputs) -> bool {
    use std::collections::HashSet;
    let proposals: HashSet<usize> = out.proposals.iter().map(|d| d.id).collect();
    let survivors: HashSet<usize> = out.survivors.iter().map(|d| d.id).collect();
    let s = out.stats;
    survivors.is_subset(&proposals)
        && out.detections.iter().all(|d| survivors.contains(&d.id))
        && s.survivors + s.rejected == s.proposals
        && s.proposals == out.proposals.len()
        && s.final_detections == out.detections.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{match_detections, MatchRule};
    use crate::image::RasterSource;

    fn planted() -> (RasterSource, Vec<(f64, f64)>) {
        let centers = vec![(40.0, 40.0), (450.0, 30.0), (500.0, 500.0), (700.0, 420.0), (990.0, 1000.0), (205.5, 800.25)];
        (RasterSource::new("slide", Image::new(1024, 1024)), centers)
    }

    fn oracle(centers: &[(f64, f64)]) -> OracleProposer {
        OracleProposer::new([("slide".to_string(), centers.to_vec())].into_iter().collect(), 50.0)
    }

    #[test]
    fn empty_proposer_gives_empty_output() {
        let (src, _) = planted();
        let r = run_wsi(&src, &oracle(&[]), Some(&ConstantClassifier::new(1.0)), &PipelineConfig::default()).unwrap();
        assert!(r.detections().is_empty());
        assert_eq!(r.stats().proposals, 0);
        assert_eq!(r.stats().patches, 9);
    }

    #[test]
    fn oracle_models_recover_every_planted_object() {
        let (src, centers) = planted();
        let r = run_wsi(&src, &oracle(&centers), Some(&ConstantClassifier::new(1.0)), &PipelineConfig::default()).unwrap();
        assert_eq!(r.detections().len(), centers.len());
        let m = match_detections(r.detections(), &centers, MatchRule::Center(5.0));
        assert_eq!(m.tp, centers.len());
        assert!(subset_chain_holds(&r.outputs));
        assert_eq!(r.stats().rejected, 0);
        // Objects in overlap regions are proposed by several patches.
        assert!(r.stats().proposals > centers.len());
    }

    #[test]
    fn classifier_threshold_keeps_one_half() {
        let (src, centers) = planted();
        let keep = run_wsi(&src, &oracle(&centers), Some(&ConstantClassifier::new(0.5)), &PipelineConfig::default()).unwrap();
        assert_eq!(keep.detections().len(), centers.len());
        let drop = run_wsi(&src, &oracle(&centers), Some(&ConstantClassifier::new(0.499)), &PipelineConfig::default()).unwrap();
        assert!(drop.detections().is_empty());
        assert_eq!(drop.stats().rejected, drop.stats().proposals);
    }

    #[test]
    fn patch_order_and_workers_do_not_change_output() {
        let (src, centers) = planted();
        let cfg = PipelineConfig::default();
        let base = run_wsi(&src, &oracle(&centers), Some(&ConstantClassifier::new(0.9)), &cfg).unwrap();
        let rev: Vec<usize> = (0..9).rev().collect();
        let shuffled = run_wsi_in_order(&src, &oracle(&centers), Some(&ConstantClassifier::new(0.9)), &cfg, &rev).unwrap();
        assert_eq!(base.outputs, shuffled.outputs);
        let two = run_wsi(&src, &oracle(&centers), Some(&ConstantClassifier::new(0.9)), &PipelineConfig { workers: 2, ..cfg }).unwrap();
        assert_eq!(base.outputs, two.outputs);
        assert!(run_wsi_in_order(&src, &oracle(&centers), None, &PipelineConfig::default(), &[0, 1]).is_err());
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let (src, _) = planted();
        let p = OracleProposer { required_patch: Some(256), ..oracle(&[]) };
        assert!(run_wsi(&src, &p, None, &PipelineConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        assert!(PipelineConfig { conf_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { overlap: 1.0, ..Default::default() }.validate().is_err());
        assert_eq!(PipelineConfig { cache_conf: Some(0.05), ..Default::default() }.generation_conf(), 0.05);
    }
}
