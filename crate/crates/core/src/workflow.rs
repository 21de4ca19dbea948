//! End-to-end steps shared by the command line and the integration tests:
//! open a dataset directory, train both stages, run and score inference.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::augment::DetSample;
use crate::classifier::{mine_crops, train_classifier, Classifier, ClassifierEpoch, CropSample};
use crate::config::RunConfig;
use crate::data_io::{load_manifest, read_annotations_file, split, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{match_detections, EvalReport};
use crate::image::{Image, RasterSource};
use crate::pipeline::{run_wsi, CandidateClassifier, CandidateProposer, OracleProposer, PipelineConfig, WsiResult};
use crate::proposer::{train_proposer, Proposer, ProposerEpoch};

/// A dataset directory: `images/<id>.png`, `annotations.csv` and optionally a
/// `manifest.json` holding the split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Opens `root`, reading its manifest when present and otherwise building
    /// one and splitting with `seed`.
    pub fn open(root: &Path, seed: u64) -> Result<Self> {
        let mpath = root.join("manifest.json");
        let manifest = if mpath.exists() {
            DatasetManifest::read_json(&mpath)?
        } else {
            split(&load_manifest(&root.join("annotations.csv"), &root.join("images"))?, seed)
        };
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.manifest.ids_in(split)
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        let e = self.manifest.image(id).ok_or_else(|| Error::Data(format!("image {id:?} not in manifest")))?;
        Ok(self.root.join("images").join(&e.path))
    }

    pub fn load_image(&self, id: &str) -> Result<Image> {
        Image::load(&self.image_path(id)?)
    }

    pub fn source(&self, id: &str) -> Result<RasterSource> {
        Ok(RasterSource::new(id, self.load_image(id)?))
    }

    pub fn centers(&self, id: &str) -> Vec<(f64, f64)> {
        self.manifest.centers_for(id)
    }

    /// Ground-truth centers of every image in `split`.
    pub fn ground_truth(&self, split: Split) -> HashMap<String, Vec<(f64, f64)>> {
        self.ids(split).iter().map(|id| (id.clone(), self.centers(id))).collect()
    }
}

/// Detector training patches of every image in `split`.
pub fn proposer_samples(ds: &Dataset, split: Split, cfg: &RunConfig) -> Result<Vec<DetSample>> {
    let mut out = Vec::new();
    for id in ds.ids(split) {
        let img = ds.load_image(id)?;
        out.extend(crate::data_io::patch_samples(&img, &ds.centers(id), cfg.pipeline.patch_size, cfg.pipeline.overlap, cfg.data.box_size)?);
    }
    Ok(out)
}

/// Builds and trains a proposer on the train split, validating on val.
pub fn train_proposer_stage(ds: &Dataset, cfg: &RunConfig) -> Result<(Proposer, Vec<ProposerEpoch>)> {
    let train = proposer_samples(ds, Split::Train, cfg)?;
    if train.is_empty() {
        return Err(Error::Data("training split has no images".into()));
    }
    let val = proposer_samples(ds, Split::Val, cfg)?;
    let mut model = Proposer::new(&cfg.proposer, cfg.seed)?;
    log::info!("training proposer on {} patches ({} val)", train.len(), val.len());
    let history = train_proposer(&mut model, &train, &val, &cfg.proposer_train)?;
    Ok((model, history))
}

/// Classifier crops mined from one split: every annotation plus every
/// proposal above `data.mine_conf`, labeled by matching.
pub fn mine_split(ds: &Dataset, split: Split, proposer: &dyn CandidateProposer, cfg: &RunConfig) -> Result<Vec<CropSample>> {
    let pc = PipelineConfig { conf_threshold: cfg.data.mine_conf, cache_conf: None, ..cfg.pipeline.clone() };
    let mut out = Vec::new();
    for id in ds.ids(split) {
        let src = ds.source(id)?;
        let res = run_wsi(&src, proposer, None, &pc)?;
        out.extend(mine_crops(src.image(), &ds.centers(id), &res.outputs.detections, &cfg.classifier, cfg.data.box_size, cfg.data.match_rule)?);
    }
    Ok(out)
}

/// Mines crops with `proposer` and trains a fresh classifier on them.
pub fn train_classifier_stage(ds: &Dataset, proposer: &dyn CandidateProposer, cfg: &RunConfig) -> Result<(Classifier, Vec<ClassifierEpoch>)> {
    let train = mine_split(ds, Split::Train, proposer, cfg)?;
    let val = mine_split(ds, Split::Val, proposer, cfg)?;
    let pos = |v: &[CropSample]| v.iter().filter(|c| c.label >= 0.5).count();
    log::info!("mined {} train crops ({} mitosis), {} val crops ({} mitosis)", train.len(), pos(&train), val.len(), pos(&val));
    let mut model = Classifier::new(&cfg.classifier, cfg.seed)?;
    let history = train_classifier(&mut model, &train, &val, &cfg.classifier_train)?;
    Ok((model, history))
}

/// Runs the pipeline on every image of `split`.
pub fn infer_split(
    ds: &Dataset,
    split: Split,
    proposer: &dyn CandidateProposer,
    classifier: Option<&dyn CandidateClassifier>,
    cfg: &PipelineConfig,
) -> Result<Vec<(String, WsiResult)>> {
    ds.ids(split).iter().map(|id| Ok((id.clone(), run_wsi(&ds.source(id)?, proposer, classifier, cfg)?))).collect()
}

/// Scores per-image results against the dataset annotations.
pub fn score_results(ds: &Dataset, results: &[(String, WsiResult)], cfg: &RunConfig) -> EvalReport {
    EvalReport::from_results(results.iter().map(|(id, r)| (id.clone(), match_detections(r.detections(), &ds.centers(id), cfg.data.match_rule))).collect())
}

/// An oracle proposer over the centers in an annotation CSV.
pub fn oracle_proposer(annotations: &Path, box_size: f64) -> Result<OracleProposer> {
    let mut centers: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for a in read_annotations_file(annotations)? {
        centers.entry(a.image_id).or_default().push((a.cx, a.cy));
    }
    Ok(OracleProposer::new(centers, box_size))
}
