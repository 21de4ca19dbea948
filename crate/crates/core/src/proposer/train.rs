//! Proposer training: AdamW with cosine annealing on augmented patches.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_detection, AugmentProfile, DetSample};
use crate::error::{Error, Result};
use crate::eval::{match_detections, metrics, MatchRule, Metrics};
use crate::geometry::BBox;
use crate::image::batch_tensor;
use crate::nn::optim::{cosine_lr, AdamW};
use crate::nn::Graph;

use super::detector::Proposer;
use super::head::FlatPredictions;
use super::loss::{detection_loss, LossParts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lrf: f64,
    pub weight_decay: f64,
    /// Side of the random training crops; `None` trains on whole patches.
    pub train_size: Option<usize>,
    /// Chance that a training crop is centered near an annotated object.
    pub object_crop_p: f64,
    pub augment: AugmentProfile,
    pub match_rule: MatchRule,
}

impl ProposerTrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 300,
            batch_size: 960,
            lr0: 1e-3,
            lrf: 1e-5,
            weight_decay: 5e-4,
            train_size: None,
            object_crop_p: 0.0,
            augment: AugmentProfile::detection(),
            match_rule: MatchRule::default(),
        }
    }

    pub fn desk() -> Self {
        Self { epochs: 30, batch_size: 8, train_size: Some(256), object_crop_p: 0.7, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("proposer training needs epochs >= 1 and batch_size >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lrf > 0.0 && self.lrf <= self.lr0) {
            return Err(Error::Config(format!("learning rates lr0={} lrf={} invalid", self.lr0, self.lrf)));
        }
        if let Some(s) = self.train_size {
            if s == 0 || s % 32 != 0 {
                return Err(Error::Config(format!("train_size {s} must be a positive multiple of 32")));
            }
        }
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposerEpoch {
    pub epoch: usize,
    pub loss_box: f64,
    pub loss_cls: f64,
    pub loss_dfl: f64,
    pub val_p: f64,
    pub val_r: f64,
    pub val_f1: f64,
}

pub fn write_proposer_history<W: Write>(rows: &[ProposerEpoch], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss_box", "loss_cls", "loss_dfl", "val_p", "val_r", "val_f1"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.loss_box),
            format!("{:.6}", r.loss_cls),
            format!("{:.6}", r.loss_dfl),
            format!("{:.6}", r.val_p),
            format!("{:.6}", r.val_r),
            format!("{:.6}", r.val_f1),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))?;
    Ok(())
}

/// A `size x size` window of `s`, biased towards objects with probability
/// `object_p`; boxes are clipped and those less than a quarter visible dropped.
pub fn random_crop<R: Rng>(s: &DetSample, size: usize, object_p: f64, rng: &mut R) -> DetSample {
    let (w, h) = (s.image.width(), s.image.height());
    if w <= size && h <= size {
        return DetSample { image: s.image.crop(0, 0, size, size), boxes: s.boxes.clone() };
    }
    let (mx, my) = (w.saturating_sub(size), h.saturating_sub(size));
    let (x0, y0) = if !s.boxes.is_empty() && rng.random::<f64>() < object_p {
        let b = s.boxes[rng.random_range(0..s.boxes.len())];
        let (cx, cy) = b.center();
        let jx = rng.random_range(-(size as f64) / 3.0..=size as f64 / 3.0);
        let jy = rng.random_range(-(size as f64) / 3.0..=size as f64 / 3.0);
        let x = (cx + jx - size as f64 / 2.0).round().clamp(0.0, mx as f64) as usize;
        let y = (cy + jy - size as f64 / 2.0).round().clamp(0.0, my as f64) as usize;
        (x, y)
    } else {
        (rng.random_range(0..=mx), rng.random_range(0..=my))
    };
    let image = s.image.crop(x0 as isize, y0 as isize, size, size);
    let boxes = s
        .boxes
        .iter()
        .filter_map(|b| {
            let moved = b.translate(-(x0 as f64), -(y0 as f64));
            let c = moved.clip(size as f64, size as f64)?;
            (c.area() >= 0.25 * b.area()).then_some(c)
        })
        .collect();
    DetSample { image, boxes }
}

impl Proposer {
    fn forward_loss(&self, batch: &[DetSample], backward: bool) -> Result<(LossParts, Option<std::collections::HashMap<crate::nn::ParamId, crate::tensor::Tensor<f32>>>)> {
        let imgs: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let x = batch_tensor(&imgs, None)?;
        let mut g = if backward { Graph::new(&self.params) } else { Graph::inference(&self.params) };
        let xv = g.input(x);
        let outs = self.model.forward(&mut g, xv)?;
        let levels: Vec<_> = outs.iter().map(|o| (o.stride, g.value(o.box_logits), g.value(o.cls_logits))).collect();
        let pred = FlatPredictions::from_levels(&levels, self.model.config.reg_max)?;
        let targets: Vec<Vec<BBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
        let loss = detection_loss(&pred, &targets, &self.model.config);
        if !backward {
            return Ok((loss.parts, None));
        }
        let per_level = pred.unflatten(&loss.box_grad, &loss.cls_grad)?;
        let mut seeds = Vec::with_capacity(2 * outs.len());
        for (o, (gb, gc)) in outs.iter().zip(per_level) {
            seeds.push((o.box_logits, gb));
            seeds.push((o.cls_logits, gc));
        }
        let grads = g.backward(seeds)?;
        Ok((loss.parts, Some(grads.into_params())))
    }

    /// Loss of one batch without updating the weights.
    pub fn batch_loss(&self, batch: &[DetSample]) -> Result<LossParts> {
        Ok(self.forward_loss(batch, false)?.0)
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[DetSample], opt: &mut AdamW, lr: f64) -> Result<LossParts> {
        let (parts, grads) = self.forward_loss(batch, true)?;
        opt.step(&mut self.params, &grads.expect("backward requested"), lr);
        Ok(parts)
    }

    /// Micro-averaged P/R/F1 of the current proposals against box centers.
    pub fn validate_on(&self, samples: &[DetSample], rule: MatchRule) -> Result<Metrics> {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for s in samples {
            let dets = self.propose_any(&s.image, 0)?;
            let gts: Vec<(f64, f64)> = s.boxes.iter().map(BBox::center).collect();
            let m = match_detections(&dets, &gts, rule);
            (tp, fp, fn_) = (tp + m.tp, fp + m.fp, fn_ + m.fn_);
        }
        Ok(metrics(tp, fp, fn_))
    }
}

/// Trains `model` in place. When `val` is non-empty the weights with the best
/// validation F1 are restored at the end.
pub fn train_proposer(model: &mut Proposer, train: &[DetSample], val: &[DetSample], cfg: &ProposerTrainConfig) -> Result<Vec<ProposerEpoch>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("proposer training set is empty".into()));
    }
    if train.iter().all(|s| s.boxes.is_empty()) {
        return Err(Error::InvalidInput("proposer training set has no annotations".into()));
    }
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, crate::nn::ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lrf);
        let mut rng = cfg.augment.rng(epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (LossParts::default(), 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut s = augment_detection(&train[i], train, &cfg.augment, epoch, &mut rng)?;
                if let Some(size) = cfg.train_size {
                    s = random_crop(&s, size, cfg.object_crop_p, &mut rng);
                }
                batch.push(s);
            }
            let parts = model.train_step(&batch, &mut opt, lr)?;
            sum.box_loss += parts.box_loss;
            sum.cls_loss += parts.cls_loss;
            sum.dfl_loss += parts.dfl_loss;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let m = if val.is_empty() { Metrics { precision: 0.0, recall: 0.0, f1: 0.0 } } else { model.validate_on(val, cfg.match_rule)? };
        let row = ProposerEpoch { epoch, loss_box: sum.box_loss / n, loss_cls: sum.cls_loss / n, loss_dfl: sum.dfl_loss / n, val_p: m.precision, val_r: m.recall, val_f1: m.f1 };
        log::info!(
            "proposer epoch {epoch}: lr {lr:.2e} box {:.4} cls {:.4} dfl {:.4} val P {:.3} R {:.3} F1 {:.3}",
            row.loss_box,
            row.loss_cls,
            row.loss_dfl,
            m.precision,
            m.recall,
            m.f1
        );
        history.push(row);
        if !val.is_empty() && best.as_ref().is_none_or(|(f, _)| m.f1 > *f) {
            best = Some((m.f1, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::proposer::ProposerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob_sample(seed: u64, size: usize) -> DetSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = Image::new(size, size);
        image.data_mut().iter_mut().for_each(|v| *v = 0.8 + 0.1 * rng.random::<f32>());
        let mut boxes = Vec::new();
        for _ in 0..3 {
            let (cx, cy) = (rng.random_range(20.0..size as f64 - 20.0), rng.random_range(20.0..size as f64 - 20.0));
            for c in 0..3 {
                for y in (cy as usize - 6)..(cy as usize + 6) {
                    for x in (cx as usize - 6)..(cx as usize + 6) {
                        image.set(c, x, y, 0.2);
                    }
                }
            }
            boxes.push(BBox::centered(cx, cy, 24.0).unwrap());
        }
        DetSample { image, boxes }
    }

    #[test]
    fn one_step_decreases_batch_loss() {
        // Tiny inputs leave 2x2 maps at stride 32, where the loss is too curved
        // for a meaningful first-order test.
        let mut p = Proposer::new(&ProposerConfig { input_size: 256, ..ProposerConfig::desk() }, 0).unwrap();
        let batch = vec![blob_sample(1, 256), blob_sample(2, 256)];
        let before = p.batch_loss(&batch).unwrap().total();
        let mut opt = AdamW::new(5e-4);
        p.train_step(&batch, &mut opt, 1e-5).unwrap();
        let after = p.batch_loss(&batch).unwrap().total();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut p = Proposer::new(&ProposerConfig { input_size: 64, ..ProposerConfig::desk() }, 0).unwrap();
        let cfg = ProposerTrainConfig { epochs: 1, ..ProposerTrainConfig::desk() };
        assert!(train_proposer(&mut p, &[], &[], &cfg).is_err());
        let empty = DetSample { image: Image::new(64, 64), boxes: vec![] };
        assert!(train_proposer(&mut p, &[empty], &[], &cfg).is_err());
    }

    #[test]
    fn random_crop_keeps_visible_boxes() {
        let s = blob_sample(3, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let c = random_crop(&s, 64, 0.7, &mut rng);
            assert_eq!((c.image.width(), c.image.height()), (64, 64));
            assert!(c.boxes.iter().all(|b| b.x >= 0.0 && b.y >= 0.0 && b.x2() <= 64.0 && b.y2() <= 64.0));
        }
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        write_proposer_history(&[ProposerEpoch { epoch: 0, loss_box: 1.0, loss_cls: 2.0, loss_dfl: 3.0, val_p: 0.5, val_r: 0.5, val_f1: 0.5 }], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,loss_box,loss_cls,loss_dfl,val_p,val_r,val_f1\n0,"));
    }
}
