//! AdamW with decoupled weight decay and the per-epoch cosine schedule.

use std::collections::HashMap;

use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Learning rate for `epoch` (0-based) of `epochs`, annealed on a half cosine
/// from `lr0` at the first epoch to `lrf` at the last.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64, lrf: f64) -> f64 {
    if epochs <= 1 {
        return lr0;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    lrf + 0.5 * (lr0 - lrf) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients so their global L2 norm does not exceed this value.
    pub max_grad_norm: Option<f64>,
    step: u64,
    moments: HashMap<ParamId, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, max_grad_norm: Some(10.0), step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay applies only to parameters of rank >= 2
    /// (convolution and linear weights), never to norms or biases.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &HashMap<ParamId, Tensor<f32>>, lr: f64) {
        self.step += 1;
        let clip = match self.max_grad_norm {
            Some(max) => {
                let sq: f64 = grads.values().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum();
                let norm = sq.sqrt();
                if norm > max && norm.is_finite() {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut ids: Vec<&ParamId> = grads.keys().collect();
        ids.sort();
        for &id in ids {
            let g = &grads[&id];
            let p = store.get_mut(id);
            if g.numel() != p.numel() || !g.all_finite() {
                continue;
            }
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let step_size = (lr / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let shrink = (1.0 - lr * decay) as f32;
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip as f32;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w *= shrink;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + self.eps as f32);
            }
        }
    }
}

/// Patience-based early stopping on a metric that should increase.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: None }
    }

    /// Records the metric for `epoch`; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best || self.best_epoch.is_none() {
            self.best = metric;
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }

    /// True once `patience` epochs have passed without improvement.
    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best_epoch.is_some_and(|b| epoch >= b + self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert!((cosine_lr(0, 300, 1e-3, 1e-5) - 1e-3).abs() < 1e-15);
        assert!((cosine_lr(299, 300, 1e-3, 1e-5) - 1e-5).abs() < 1e-15);
        let mid = cosine_lr(1, 3, 1e-3, 1e-5);
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 1, 3e-4, 1e-6), 3e-4);
    }

    #[test]
    fn adamw_moves_against_gradient_and_decays_weights_only() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::full(&[2, 2], 1.0)).unwrap();
        let b = store.add("b", Tensor::full(&[2], 1.0)).unwrap();
        let mut grads = HashMap::new();
        grads.insert(w, Tensor::zeros(&[2, 2]));
        grads.insert(b, Tensor::full(&[2], 1.0));
        let mut opt = AdamW::new(0.1);
        opt.step(&mut store, &grads, 0.01);
        assert!(store.get(w).data().iter().all(|&v| (v - 0.999).abs() < 1e-6));
        assert!(store.get(b).data().iter().all(|&v| (v - 0.99).abs() < 1e-5));
    }

    #[test]
    fn early_stopping_fires_after_patience() {
        let mut es = EarlyStopping::new(60);
        for e in 0..=10 {
            es.observe(e, e as f64 * 0.01);
        }
        for e in 11..70 {
            es.observe(e, 0.1);
            assert!(!es.should_stop(e));
        }
        es.observe(70, 0.1);
        assert!(es.should_stop(70));
        assert_eq!(es.best().unwrap().0, 10);
    }
}
