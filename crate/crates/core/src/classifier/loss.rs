//! Hybrid focal + supervised contrastive loss with hand-derived gradients.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index of the positive (mitosis) class.
pub const MITOSIS: usize = 1;
/// Class index of the background / hard-negative class.
pub const BACKGROUND: usize = 0;

/// Probabilities are clamped to this value before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridLossParams {
    pub alpha_mitosis: f64,
    pub alpha_background: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub lambda: f64,
    /// Keep the `j = i` term in the contrastive denominator.
    pub include_self: bool,
}

impl Default for HybridLossParams {
    fn default() -> Self {
        Self { alpha_mitosis: 1.0, alpha_background: 1.5, gamma: 2.0, temperature: 0.2, lambda: 1.0, include_self: true }
    }
}

impl HybridLossParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_mitosis > 0.0 && self.alpha_background > 0.0 && self.gamma >= 0.0 && self.temperature > 0.0 && self.lambda >= 0.0;
        if !ok || ![self.alpha_mitosis, self.alpha_background, self.gamma, self.temperature, self.lambda].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("invalid loss parameters {self:?}")));
        }
        Ok(())
    }

    pub fn alpha(&self, class: usize) -> f64 {
        if class == MITOSIS {
            self.alpha_mitosis
        } else {
            self.alpha_background
        }
    }
}

/// Per-sample unit features, class labels and the probability the model
/// assigns to each sample's own class.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub probs: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if features.len() != n || probs.len() != n {
            return Err(Error::Shape(format!("batch with {} features, {n} labels, {} probabilities", features.len(), probs.len())));
        }
        if let Some(d) = features.first().map(Vec::len) {
            if features.iter().any(|f| f.len() != d) {
                return Err(Error::Shape("features of different lengths".into()));
            }
        }
        for (i, f) in features.iter().enumerate() {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("feature {i} has norm {norm}, expected 1")));
            }
        }
        if probs.iter().any(|p| !(p.is_finite() && *p <= 1.0)) {
            return Err(Error::InvalidInput("probabilities must be finite and at most 1".into()));
        }
        Ok(Self { features, labels, probs })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `alpha * (1 - p)^gamma * -ln p` and its derivative in `p`, with `p`
/// clamped to [`PROB_EPS`] (the derivative is zero inside the clamp).
fn focal_term(p: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let clamped = p < PROB_EPS;
    let p = p.max(PROB_EPS).min(1.0);
    let q = 1.0 - p;
    let lp = p.ln();
    let value = -alpha * q.powf(gamma) * lp;
    if clamped {
        return (value, 0.0);
    }
    // d/dp = alpha * (gamma (1-p)^(gamma-1) ln p - (1-p)^gamma / p); the first
    // term vanishes at p = 1 (ln p = 0) even when gamma < 1.
    let first = if q > 0.0 && gamma != 0.0 { gamma * q.powf(gamma - 1.0) * lp } else { 0.0 };
    (value, alpha * (first - q.powf(gamma) / p))
}

/// Mean focal loss over the batch.
pub fn focal_loss(batch: &EmbeddingBatch, params: &HybridLossParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("focal loss of an empty batch".into()));
    }
    let sum: f64 = batch.probs.iter().zip(&batch.labels).map(|(&p, &c)| focal_term(p, params.alpha(c), params.gamma).0).sum();
    Ok(sum / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    /// Samples that had a positive partner and entered the mean.
    pub contributing: usize,
    /// Set when no sample had a positive; `value` is then 0.
    pub all_skipped: bool,
}

/// Picks, for every sample, a uniformly random other sample of the same class.
pub fn choose_positives<R: Rng>(labels: &[usize], rng: &mut R) -> Vec<Option<usize>> {
    (0..labels.len())
        .map(|i| {
            let same: Vec<usize> = (0..labels.len()).filter(|&j| j != i && labels[j] == labels[i]).collect();
            same.choose(rng).copied()
        })
        .collect()
}

/// Deterministic partner choice: the next same-class sample, cyclically.
pub fn next_positives(labels: &[usize]) -> Vec<Option<usize>> {
    let n = labels.len();
    (0..n).map(|i| (1..n).map(|k| (i + k) % n).find(|&j| labels[j] == labels[i])).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Contrastive loss of unit features and, when `want_grad`, its gradient with
/// respect to those unit vectors.
fn contrastive_unit(
    units: &[Vec<f64>],
    positives: &[Option<usize>],
    params: &HybridLossParams,
    want_grad: bool,
) -> Result<(ContrastiveLoss, Vec<Vec<f64>>)> {
    let n = units.len();
    if positives.len() != n {
        return Err(Error::Shape(format!("{} positives for {n} samples", positives.len())));
    }
    let dim = units.first().map_or(0, Vec::len);
    let mut grads = if want_grad { vec![vec![0.0; dim]; n] } else { Vec::new() };
    let contributing: Vec<(usize, usize)> = positives.iter().enumerate().filter_map(|(i, p)| p.map(|p| (i, p))).collect();
    if let Some(&(i, p)) = contributing.iter().find(|&&(i, p)| p >= n || p == i) {
        return Err(Error::InvalidInput(format!("sample {i} has invalid positive {p}")));
    }
    if contributing.is_empty() {
        return Ok((ContrastiveLoss { value: 0.0, contributing: 0, all_skipped: true }, grads));
    }
    let t = params.temperature;
    let scale = 1.0 / contributing.len() as f64;
    let mut total = 0.0;
    for &(i, p) in &contributing {
        let js: Vec<usize> = (0..n).filter(|&j| params.include_self || j != i).collect();
        let logits: Vec<f64> = js.iter().map(|&j| dot(&units[i], &units[j]) / t).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let lse = m + sum.ln();
        let s_pos = dot(&units[i], &units[p]) / t;
        total += lse - s_pos;
        if want_grad {
            // d(-s_ip/T)/du_i = -u_p/T and d/du_p = -u_i/T.
            for k in 0..dim {
                grads[i][k] -= scale * units[p][k] / t;
                grads[p][k] -= scale * units[i][k] / t;
            }
            for (&j, &l) in js.iter().zip(&logits) {
                let w = scale * (l - lse).exp() / t;
                if j == i {
                    // s_ii = u_i . u_i contributes 2 u_i.
                    for k in 0..dim {
                        grads[i][k] += 2.0 * w * units[i][k];
                    }
                } else {
                    for k in 0..dim {
                        grads[i][k] += w * units[j][k];
                        grads[j][k] += w * units[i][k];
                    }
                }
            }
        }
    }
    Ok((ContrastiveLoss { value: total * scale, contributing: contributing.len(), all_skipped: false }, grads))
}

/// Supervised contrastive loss with explicit positive partners. Samples whose
/// partner is `None` are left out and the mean is taken over the rest.
pub fn contrastive_loss(batch: &EmbeddingBatch, positives: &[Option<usize>], params: &HybridLossParams) -> Result<ContrastiveLoss> {
    if params.temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    for (i, p) in positives.iter().enumerate() {
        if let Some(p) = *p {
            if p < batch.len() && batch.labels[p] != batch.labels[i] {
                return Err(Error::InvalidInput(format!("positive {p} of sample {i} has a different class")));
            }
        }
    }
    let (loss, _) = contrastive_unit(&batch.features, positives, params, false)?;
    if loss.all_skipped {
        log::warn!("contrastive loss: no sample has an in-batch positive");
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub contrastive: f64,
    pub contrastive_skipped: bool,
}

/// `focal + lambda * contrastive`.
pub fn total_loss(batch: &EmbeddingBatch, positives: &[Option<usize>], params: &HybridLossParams) -> Result<LossBreakdown> {
    let focal = focal_loss(batch, params)?;
    let c = contrastive_loss(batch, positives, params)?;
    Ok(LossBreakdown { total: focal + params.lambda * c.value, focal, contrastive: c.value, contrastive_skipped: c.all_skipped })
}

/// Loss of a batch of network outputs together with gradients for backprop.
#[derive(Clone, Debug)]
pub struct HybridGrad {
    pub parts: LossBreakdown,
    /// `(N, 2)` row-major.
    pub d_logits: Vec<f64>,
    /// `(N, D)` row-major, with respect to the unnormalized features.
    pub d_features: Vec<f64>,
}

/// Hybrid loss from two-class `logits` `(N, 2)` and raw `features` `(N, D)`.
///
/// `targets` holds the mitosis probability of each sample's label. Soft labels
/// (from mixup) weight the two per-class focal terms; the contrastive class is
/// the label rounded at 0.5.
pub fn hybrid_loss(
    logits: &[f64],
    features: &[f64],
    targets: &[f64],
    positives: &[Option<usize>],
    params: &HybridLossParams,
) -> Result<HybridGrad> {
    let n = targets.len();
    if n == 0 || logits.len() != 2 * n || features.len() % n != 0 {
        return Err(Error::Shape(format!("hybrid loss: {} logits, {} features for {n} samples", logits.len(), features.len())));
    }
    let dim = features.len() / n;
    let mut d_logits = vec![0.0; 2 * n];
    let mut focal = 0.0;
    for i in 0..n {
        let (z0, z1) = (logits[2 * i], logits[2 * i + 1]);
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        let p = [(z0 - lse).exp(), (z1 - lse).exp()];
        let y = targets[i].clamp(0.0, 1.0);
        let weights = [1.0 - y, y];
        let mut dp = [0.0; 2];
        for c in 0..2 {
            if weights[c] == 0.0 {
                continue;
            }
            let (v, g) = focal_term(p[c], params.alpha(c), params.gamma);
            focal += weights[c] * v / n as f64;
            dp[c] = weights[c] * g / n as f64;
        }
        // Softmax Jacobian: dp_c/dz_k = p_c (delta_ck - p_k).
        for k in 0..2 {
            d_logits[2 * i + k] = (0..2).map(|c| dp[c] * p[c] * (f64::from(u8::from(c == k)) - p[k])).sum();
        }
    }

    let mut units = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for row in features.chunks(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        norms.push(norm);
        units.push(row.iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    let (c, du) = contrastive_unit(&units, positives, params, params.lambda != 0.0)?;
    let mut d_features = vec![0.0; n * dim];
    if params.lambda != 0.0 && !c.all_skipped {
        for i in 0..n {
            // Project through u = f / |f|: df = (du - u (u . du)) / |f|.
            let proj = dot(&units[i], &du[i]);
            for k in 0..dim {
                d_features[i * dim + k] = params.lambda * (du[i][k] - units[i][k] * proj) / norms[i];
            }
        }
    }
    let parts = LossBreakdown { total: focal + params.lambda * c.value, focal, contrastive: c.value, contrastive_skipped: c.all_skipped };
    Ok(HybridGrad { parts, d_logits, d_features })
}

/// Contrastive classes from (possibly soft) mitosis targets.
pub fn hard_labels(targets: &[f64]) -> Vec<usize> {
    targets.iter().map(|&y| if y >= 0.5 { MITOSIS } else { BACKGROUND }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(label: usize, p: f64) -> EmbeddingBatch {
        EmbeddingBatch::new(vec![vec![1.0, 0.0]], vec![label], vec![p]).unwrap()
    }

    #[test]
    fn focal_examples() {
        let params = HybridLossParams::default();
        assert_eq!(focal_loss(&single(MITOSIS, 1.0), &params).unwrap(), 0.0);
        let v = focal_loss(&single(MITOSIS, 0.5), &params).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        let v = focal_loss(&single(BACKGROUND, 0.9), &params).unwrap();
        assert!((v - 1.5 * 0.01 * -(0.9f64.ln())).abs() < 1e-12);
        assert!(focal_loss(&single(MITOSIS, 0.0), &params).unwrap().is_finite());
    }

    #[test]
    fn contrastive_examples() {
        let params = HybridLossParams::default();
        let f = vec![0.6, 0.8];
        let same = EmbeddingBatch::new(vec![f.clone(), f.clone()], vec![1, 1], vec![1.0, 1.0]).unwrap();
        let pos = next_positives(&same.labels);
        assert!((contrastive_loss(&same, &pos, &params).unwrap().value - 2f64.ln()).abs() < 1e-12);
        let opp = EmbeddingBatch::new(vec![f.clone(), vec![-0.6, -0.8]], vec![1, 1], vec![1.0, 1.0]).unwrap();
        let expected = -((-5f64).exp() / (5f64.exp() + (-5f64).exp())).ln();
        assert!((contrastive_loss(&opp, &pos, &params).unwrap().value - expected).abs() < 1e-9);
        assert!((expected - 10.0000454).abs() < 1e-7);
    }

    #[test]
    fn contrastive_skips_samples_without_positive() {
        let params = HybridLossParams::default();
        let b = EmbeddingBatch::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1], vec![0.5, 0.5]).unwrap();
        let pos = next_positives(&b.labels);
        assert_eq!(pos, vec![None, None]);
        let c = contrastive_loss(&b, &pos, &params).unwrap();
        assert!(c.all_skipped && c.value == 0.0);
    }

    #[test]
    fn total_is_focal_plus_weighted_contrastive() {
        let f = vec![1.0, 0.0];
        let b = EmbeddingBatch::new(vec![f.clone(), f], vec![1, 1], vec![1.0, 1.0]).unwrap();
        let pos = next_positives(&b.labels);
        let t = total_loss(&b, &pos, &HybridLossParams::default()).unwrap();
        assert!((t.total - 2f64.ln()).abs() < 1e-12);
        let t = total_loss(&b, &pos, &HybridLossParams { lambda: 0.0, ..Default::default() }).unwrap();
        assert_eq!(t.total, t.focal);
    }

    #[test]
    fn random_positives_share_the_class() {
        let labels = vec![0, 1, 0, 1, 1, 0, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = choose_positives(&labels, &mut rng);
        for (i, p) in pos.iter().enumerate() {
            match p {
                Some(j) => assert!(*j != i && labels[*j] == labels[i]),
                None => assert_eq!(labels[i], 2),
            }
        }
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (6, 5);
        let logits: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let feats: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = vec![1.0, 0.0, 1.0, 0.3, 0.0, 1.0];
        let pos = choose_positives(&hard_labels(&targets), &mut rng);
        let params = HybridLossParams::default();
        let g = hybrid_loss(&logits, &feats, &targets, &pos, &params).unwrap();
        let f = |l: &[f64], x: &[f64]| hybrid_loss(l, x, &targets, &pos, &params).unwrap().parts.total;
        let h = 1e-6;
        for k in 0..logits.len() {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a[k] += h;
            b[k] -= h;
            let num = (f(&a, &feats) - f(&b, &feats)) / (2.0 * h);
            assert!((num - g.d_logits[k]).abs() < 1e-6 * (1.0 + num.abs()), "logit {k}: {num} vs {}", g.d_logits[k]);
        }
        for k in 0..feats.len() {
            let (mut a, mut b) = (feats.clone(), feats.clone());
            a[k] += h;
            b[k] -= h;
            let num = (f(&logits, &a) - f(&logits, &b)) / (2.0 * h);
            assert!((num - g.d_features[k]).abs() < 1e-6 * (1.0 + num.abs()), "feature {k}: {num} vs {}", g.d_features[k]);
        }
    }
}
