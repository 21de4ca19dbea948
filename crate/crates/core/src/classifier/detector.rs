use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::image::{batch_tensor, Image};
use crate::nn::params::read_checkpoint_metadata;
use crate::nn::{Graph, ParamBuilder, ParamStore};

use super::model::{ClassifierConfig, ConvNext};

/// A candidate crop, resized to the classifier input, with the detection it
/// came from. Pixels stay in `[0, 1]`; mean/std normalization is applied when
/// the crop enters the network.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub crop: Image,
    pub source: Detection,
}

/// Resamples `bbox`, grown by `margin` of its side on every edge, to
/// `size x size` pixels.
pub fn extract_crop(image: &Image, bbox: &BBox, size: usize, margin: f64) -> Image {
    let region = BBox { x: bbox.x - margin * bbox.w, y: bbox.y - margin * bbox.h, w: bbox.w * (1.0 + 2.0 * margin), h: bbox.h * (1.0 + 2.0 * margin) };
    image.crop_resize(&region, size, size)
}

impl Candidate {
    /// Crops `source` out of `image`, which must be in the detection's frame.
    pub fn from_detection(image: &Image, source: Detection, config: &ClassifierConfig) -> Self {
        let crop = extract_crop(image, &source.bbox, config.input_size, config.crop_margin);
        Self { crop, source }
    }
}

/// A ConvNeXt classifier together with its weights.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub model: ConvNext,
    pub params: ParamStore<f32>,
}

impl Classifier {
    pub const KIND: &'static str = "classifier";
    /// Crops scored per forward pass.
    const CHUNK: usize = 64;

    pub fn new(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ConvNext::new(&mut ParamBuilder::new(&mut params, &mut rng), config)?;
        Ok(Self { model, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.model.config
    }

    /// Two-class logits `[background, mitosis]` per crop.
    pub fn logits(&self, crops: &[&Image]) -> Result<Vec<[f64; 2]>> {
        let cfg = self.config();
        let n = cfg.input_size;
        if let Some(c) = crops.iter().find(|c| c.width() != n || c.height() != n) {
            return Err(Error::Shape(format!("classifier expects {n}x{n} crops, got {}x{}", c.width(), c.height())));
        }
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(Self::CHUNK) {
            let x = batch_tensor(chunk, Some((cfg.mean, cfg.std)))?;
            let mut g = Graph::inference(&self.params);
            let xv = g.input(x);
            let o = self.model.forward(&mut g, xv)?;
            out.extend(g.value(o.logits).data().chunks(2).map(|l| [l[0] as f64, l[1] as f64]));
        }
        Ok(out)
    }

    /// Mitosis probability of each crop.
    pub fn score_crops(&self, crops: &[&Image]) -> Result<Vec<f64>> {
        Ok(self.logits(crops)?.into_iter().map(|[a, b]| mitosis_probability(a, b)).collect())
    }

    pub fn classify(&self, candidates: &[Candidate]) -> Result<Vec<f64>> {
        let crops: Vec<&Image> = candidates.iter().map(|c| &c.crop).collect();
        self.score_crops(&crops)
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
            return Err(Error::Checkpoint(format!("{} is not a classifier checkpoint", path.display())));
        }
        let config: ClassifierConfig = serde_json::from_str(meta.get("config").ok_or_else(|| Error::Checkpoint("missing config".into()))?)?;
        let mut c = Self::new(&config, 0)?;
        c.params.load(path)?;
        Ok(c)
    }
}

/// Softmax probability of the second (mitosis) logit.
pub fn mitosis_probability(background: f64, mitosis: f64) -> f64 {
    1.0 / (1.0 + (background - mitosis).exp())
}

/// Candidates at or above `threshold`; those below it are rejected.
pub fn keep_above(candidates: Vec<Candidate>, scores: &[f64], threshold: f64) -> Vec<(Candidate, f64)> {
    candidates.into_iter().zip(scores.iter().copied()).filter(|(_, s)| *s >= threshold).collect()
}
