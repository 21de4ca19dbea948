//! Central finite-difference verification of graph gradients in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Graph, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.max_rel_err = self.max_rel_err.max(rel);
        self.checked += 1;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries sampled from the input tensor.
    pub input_samples: usize,
    /// Entries sampled across all parameters.
    pub param_samples: usize,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero up to rounding do not divide by zero.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, input_samples: 48, param_samples: 48, floor: 1e-6, seed: 0 }
    }
}

/// Checks the gradient of `sum(r * f(x))` for a fixed random `r` with respect
/// to sampled entries of `x` and of the parameters in `store`.
pub fn check_gradients<F>(store: &ParamStore<f64>, x: &Tensor<f64>, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let objective = |store: &ParamStore<f64>, x: &Tensor<f64>, r: Option<&Tensor<f64>>| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::inference(store);
        let v = g.input(x.clone());
        let y = f(&mut g, v)?;
        let shape = g.shape(y).to_vec();
        let val = match r {
            Some(r) => g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            None => 0.0,
        };
        Ok((val, shape))
    };
    let (_, out_shape) = objective(store, x, None)?;
    let r = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));

    let mut g = Graph::new(store);
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(vec![(y, r.clone())])?;
    let mut report = GradCheckReport::default();

    let gx = grads.leaf(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    for i in sample(&mut rng, x.numel(), opts.input_samples.min(x.numel())) {
        let mut xp = x.clone();
        xp.data_mut()[i] += opts.step;
        let mut xm = x.clone();
        xm.data_mut()[i] -= opts.step;
        let numeric = (objective(store, &xp, Some(&r))?.0 - objective(store, &xm, Some(&r))?.0) / (2.0 * opts.step);
        report.record(gx.data()[i], numeric, opts.floor);
    }

    let entries: Vec<(crate::nn::ParamId, usize)> = store.ids().flat_map(|id| (0..store.get(id).numel()).map(move |j| (id, j))).collect();
    for k in sample(&mut rng, entries.len(), opts.param_samples.min(entries.len())) {
        let (id, j) = entries[k];
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[j]);
        let mut sp = store.clone();
        sp.get_mut(id).data_mut()[j] += opts.step;
        let mut sm = store.clone();
        sm.get_mut(id).data_mut()[j] -= opts.step;
        let numeric = (objective(&sp, x, Some(&r))?.0 - objective(&sm, x, Some(&r))?.0) / (2.0 * opts.step);
        report.record(analytic, numeric, opts.floor);
    }
    Ok(report)
}
