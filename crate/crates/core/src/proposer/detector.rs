use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Detection, Frame};
use crate::image::{batch_tensor, Image};
use crate::nn::params::read_checkpoint_metadata;
use crate::nn::{Graph, ParamBuilder, ParamStore};

use super::config::ProposerConfig;
use super::head::FlatPredictions;
use super::model::ProposerModel;

/// A proposer network together with its weights.
#[derive(Clone, Debug)]
pub struct Proposer {
    pub model: ProposerModel,
    pub params: ParamStore<f32>,
}

impl Proposer {
    pub const KIND: &'static str = "proposer";

    /// Builds a freshly initialized network.
    pub fn new(config: &ProposerConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ProposerModel::new(&mut ParamBuilder::new(&mut params, &mut rng), config)?;
        Ok(Self { model, params })
    }

    pub fn config(&self) -> &ProposerConfig {
        &self.model.config
    }

    /// Runs the frozen network on same-sized images with values in `[0, 1]`.
    pub fn predict(&self, images: &[&Image]) -> Result<FlatPredictions> {
        let x = batch_tensor(images, None)?;
        let mut g = Graph::inference(&self.params);
        let xv = g.input(x);
        let outs = self.model.forward(&mut g, xv)?;
        let levels: Vec<_> = outs.iter().map(|o| (o.stride, g.value(o.box_logits), g.value(o.cls_logits))).collect();
        FlatPredictions::from_levels(&levels, self.model.config.reg_max)
    }

    /// Candidates on one `input_size` patch, in that patch's frame.
    pub fn propose(&self, patch: &Image, patch_id: usize) -> Result<Vec<Detection>> {
        let n = self.model.config.input_size;
        if patch.width() != n || patch.height() != n {
            return Err(Error::Shape(format!("proposer expects {n}x{n} patches, got {}x{}", patch.width(), patch.height())));
        }
        self.propose_any(patch, patch_id)
    }

    /// Like [`Proposer::propose`] for any size that is a multiple of 32.
    pub fn propose_any(&self, patch: &Image, patch_id: usize) -> Result<Vec<Detection>> {
        let c = &self.model.config;
        let pred = self.predict(&[patch])?;
        pred.detections(0, c.conf_threshold, c.nms_iou, c.max_detections, Frame::Patch(patch_id))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), Self::KIND.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.model.config)?);
        self.params.save(path, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = read_checkpoint_metadata(path)?;
        if meta.get("kind").map(String::as_str) != Some(Self::KIND) {
            return Err(Error::Checkpoint(format!("{} is not a proposer checkpoint", path.display())));
        }
        let config: ProposerConfig = serde_json::from_str(meta.get("config").ok_or_else(|| Error::Checkpoint("missing config".into()))?)?;
        let mut p = Self::new(&config, 0)?;
        p.params.load(path)?;
        Ok(p)
    }
}
