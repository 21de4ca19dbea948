//! Classifier training with the hybrid loss, cosine schedule and early stopping
//! on validation F1.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_classification, AugmentProfile};
use crate::error::{Error, Result};
use crate::eval::{match_detections, metrics, MatchRule, Metrics};
use crate::geometry::{BBox, Detection};
use crate::image::{batch_tensor, Image};
use crate::nn::optim::{cosine_lr, AdamW, EarlyStopping};
use crate::nn::{Graph, ParamId};
use crate::tensor::Tensor;

use super::detector::{extract_crop, Classifier};
use super::model::ClassifierConfig;
use super::loss::{choose_positives, hard_labels, hybrid_loss, HybridLossParams, LossBreakdown};

/// A crop with the probability that it shows a mitosis (1 or 0 unless mixed).
#[derive(Clone, Debug)]
pub struct CropSample {
    pub image: Image,
    pub label: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lrf: f64,
    pub weight_decay: f64,
    pub loss: HybridLossParams,
    pub augment: AugmentProfile,
}

impl ClassifierTrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 400,
            patience: 60,
            batch_size: 960,
            lr0: 3e-4,
            lrf: 1e-6,
            weight_decay: 1e-5,
            loss: HybridLossParams::default(),
            augment: AugmentProfile::classification(),
        }
    }

    pub fn desk() -> Self {
        Self { epochs: 50, batch_size: 32, lr0: 1e-3, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier training needs epochs >= 1 and batch_size >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lrf > 0.0 && self.lrf <= self.lr0) {
            return Err(Error::Config(format!("learning rates lr0={} lrf={} invalid", self.lr0, self.lrf)));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_focal: f64,
    pub loss_contrastive: f64,
    pub val_f1: f64,
}

pub fn write_classifier_history<W: Write>(rows: &[ClassifierEpoch], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss_total", "loss_focal", "loss_contrastive", "val_f1"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.loss_total),
            format!("{:.6}", r.loss_focal),
            format!("{:.6}", r.loss_contrastive),
            format!("{:.6}", r.val_f1),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))?;
    Ok(())
}

/// Labels proposals against ground-truth centers: 1 for matched, 0 otherwise.
pub fn label_candidates(dets: &[Detection], gts: &[(f64, f64)], rule: MatchRule) -> Vec<f32> {
    let m = match_detections(dets, gts, rule);
    let mut labels = vec![0.0; dets.len()];
    for (det_id, _) in m.pairs {
        if let Some(i) = dets.iter().position(|d| d.id == det_id) {
            labels[i] = 1.0;
        }
    }
    labels
}

/// Classifier training crops from one image: a `box_size` box on every
/// ground-truth center and every proposal, labeled by matching. Unmatched
/// proposals are the hard negatives.
pub fn mine_crops(image: &Image, gts: &[(f64, f64)], proposals: &[Detection], config: &ClassifierConfig, box_size: f64, rule: MatchRule) -> Result<Vec<CropSample>> {
    let mut out = Vec::with_capacity(gts.len() + proposals.len());
    for &(cx, cy) in gts {
        let b = BBox::centered(cx, cy, box_size)?;
        out.push(CropSample { image: extract_crop(image, &b, config.input_size, config.crop_margin), label: 1.0 });
    }
    for (d, label) in proposals.iter().zip(label_candidates(proposals, gts, rule)) {
        out.push(CropSample { image: extract_crop(image, &d.bbox, config.input_size, config.crop_margin), label });
    }
    Ok(out)
}

impl Classifier {
    fn forward_loss(
        &self,
        crops: &[&Image],
        targets: &[f64],
        positives: &[Option<usize>],
        params: &HybridLossParams,
        backward: bool,
    ) -> Result<(LossBreakdown, Option<HashMap<ParamId, Tensor<f32>>>)> {
        let cfg = self.config();
        let x = batch_tensor(crops, Some((cfg.mean, cfg.std)))?;
        let mut g = if backward { Graph::new(&self.params) } else { Graph::inference(&self.params) };
        let xv = g.input(x);
        let out = self.model.forward(&mut g, xv)?;
        let logits: Vec<f64> = g.value(out.logits).data().iter().map(|&v| v as f64).collect();
        let feats: Vec<f64> = g.value(out.features).data().iter().map(|&v| v as f64).collect();
        let loss = hybrid_loss(&logits, &feats, targets, positives, params)?;
        if !backward {
            return Ok((loss.parts, None));
        }
        let to_f32 = |v: &[f64], shape: &[usize]| Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect());
        let gl = to_f32(&loss.d_logits, g.shape(out.logits))?;
        let gf = to_f32(&loss.d_features, g.shape(out.features))?;
        let grads = g.backward(vec![(out.logits, gl), (out.features, gf)])?;
        Ok((loss.parts, Some(grads.into_params())))
    }

    /// Hybrid loss of a batch with explicit contrastive partners.
    pub fn batch_loss(&self, batch: &[CropSample], positives: &[Option<usize>], params: &HybridLossParams) -> Result<LossBreakdown> {
        let crops: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let targets: Vec<f64> = batch.iter().map(|s| s.label as f64).collect();
        Ok(self.forward_loss(&crops, &targets, positives, params, false)?.0)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(
        &mut self,
        batch: &[CropSample],
        positives: &[Option<usize>],
        params: &HybridLossParams,
        opt: &mut AdamW,
        lr: f64,
    ) -> Result<LossBreakdown> {
        let crops: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let targets: Vec<f64> = batch.iter().map(|s| s.label as f64).collect();
        let (parts, grads) = self.forward_loss(&crops, &targets, positives, params, true)?;
        opt.step(&mut self.params, &grads.expect("backward requested"), lr);
        Ok(parts)
    }

    /// Precision, recall and F1 of thresholded scores against hard labels.
    pub fn validate_on(&self, samples: &[CropSample]) -> Result<Metrics> {
        let crops: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let scores = self.score_crops(&crops)?;
        let thr = self.config().threshold;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (s, p) in samples.iter().zip(scores) {
            match (s.label >= 0.5, p >= thr) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(metrics(tp, fp, fn_))
    }
}

/// Trains `model` in place and returns the per-epoch history. Training stops
/// once validation F1 has not improved for `patience` epochs, and the weights
/// of the best validation epoch are restored.
pub fn train_classifier(model: &mut Classifier, train: &[CropSample], val: &[CropSample], cfg: &ClassifierTrainConfig) -> Result<Vec<ClassifierEpoch>> {
    cfg.validate()?;
    let positives = train.iter().filter(|s| s.label >= 0.5).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::InvalidInput(format!("classifier training needs both classes; got {positives} positives of {}", train.len())));
    }
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lrf);
        let mut rng = cfg.augment.rng(epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (LossBreakdown::default(), 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let partner = &train[rng.random_range(0..train.len())];
                let (image, label) = augment_classification(&train[i].image, train[i].label, Some((&partner.image, partner.label)), &cfg.augment, &mut rng)?;
                batch.push(CropSample { image, label });
            }
            let targets: Vec<f64> = batch.iter().map(|s| s.label as f64).collect();
            let pos = choose_positives(&hard_labels(&targets), &mut rng);
            let parts = model.train_step(&batch, &pos, &cfg.loss, &mut opt, lr)?;
            sum.total += parts.total;
            sum.focal += parts.focal;
            sum.contrastive += parts.contrastive;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let f1 = if val.is_empty() { 0.0 } else { model.validate_on(val)?.f1 };
        let row = ClassifierEpoch { epoch, loss_total: sum.total / n, loss_focal: sum.focal / n, loss_contrastive: sum.contrastive / n, val_f1: f1 };
        log::info!("classifier epoch {epoch}: lr {lr:.2e} loss {:.4} (focal {:.4}, contrastive {:.4}) val F1 {f1:.3}", row.loss_total, row.loss_focal, row.loss_contrastive);
        history.push(row);
        if val.is_empty() {
            continue;
        }
        if stopper.observe(epoch, f1) {
            best = Some(model.params.clone());
        }
        if stopper.should_stop(epoch) {
            log::info!("classifier: early stop at epoch {epoch}, best {:?}", stopper.best());
            break;
        }
    }
    if let Some(params) = best {
        model.params = params;
    }
    Ok(history)
}
