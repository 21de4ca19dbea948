//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] with seed gradients on any set of outputs walks the tape
//! in reverse and returns gradients for parameters and for leaves created with
//! [`Graph::leaf`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::kernels::{array, conv, norm, spatial};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use crate::nn::kernels::conv::ConvSpec;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sigmoid(Var),
    Gelu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: norm::NormStats<T> },
    ChannelNorm { x: Var, gamma: Var, beta: Var, stats: norm::NormStats<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    MaxPool { x: Var, arg: Vec<u32> },
    Mean { x: Var },
    Upsample2x(Var),
    Softmax { x: Var, axis: usize },
    BatchMatMul(Var, Var),
    Transpose(Var),
    DynConv { x: Var, kernels: Var, k: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    track_params: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Grads<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph that differentiates with respect to every parameter it touches.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new(), track_params: true }
    }

    /// A graph for inference: parameters are constants, nothing is differentiable
    /// unless created with [`Graph::leaf`].
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { track_params: false, ..Self::new(params) }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Param(_) => self.track_params,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Moves a node's value out, leaving an empty tensor. Only valid once the
    /// graph will no longer be differentiated.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Differentiable input whose gradient is reported by [`Grads::leaf`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = self.push(t, Op::Param(id), &[]);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    /// Broadcasting addition (same rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = array::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    /// Broadcasting multiplication (same rank).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = array::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let y = self.value(x).map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (y, stats) = norm::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps)?;
        Ok(self.push(y, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta]))
    }

    /// Layer norm across channels at every pixel.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, stats) = norm::channel_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::ChannelNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let y = {
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            array::concat(&vals, axis)?
        };
        Ok(self.push(y, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = array::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(y, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Splits `x` along `axis` into consecutive chunks of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        if start != self.shape(x)[axis] {
            return Err(Error::Shape(format!("split sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape(x))));
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, arg) = spatial::max_pool2d_forward(self.value(x), k, stride, pad)?;
        Ok(self.push(y, Op::MaxPool { x, arg }, &[x]))
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = array::mean_keepdim(self.value(x), axes)?;
        Ok(self.push(y, Op::Mean { x }, &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = spatial::upsample2x_forward(self.value(x))?;
        Ok(self.push(y, Op::Upsample2x(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = array::softmax_forward(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax { x, axis }, &[x]))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = array::batch_matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes of a rank-3 value.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = array::transpose_last2(self.value(x))?;
        Ok(self.push(y, Op::Transpose(x), &[x]))
    }

    /// Per-pixel grouped `k x k` convolution with content-generated kernels of
    /// shape `(B, G, k*k, H, W)`.
    pub fn dynamic_conv(&mut self, x: Var, kernels: Var, k: usize) -> Result<Var> {
        let y = spatial::dynamic_conv_forward(self.value(x), self.value(kernels), k)?;
        Ok(self.push(y, Op::DynConv { x, kernels, k }, &[x, kernels]))
    }

    /// Reverse pass from one or more outputs, each seeded with the gradient of
    /// the scalar objective with respect to that output.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(Error::Shape(format!("seed {:?} for node of shape {:?}", g.shape(), self.shape(v))));
            }
            accumulate(&mut grads[v.0], g)?;
        }
        let mut out = Grads::default();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (gx, gw, gb) = conv::conv2d_backward(self.value(*x), self.value(*w), *spec, &g, wants(*x))?;
                    if let Some(gx) = gx {
                        accumulate(&mut grads[x.0], gx)?;
                    }
                    if wants(*w) {
                        accumulate(&mut grads[w.0], gw)?;
                    }
                    if let Some(b) = b.filter(|b| wants(*b)) {
                        accumulate(&mut grads[b.0], gb.reshape(self.shape(b))?)?;
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], array::reduce_to_shape(&g, self.shape(*a))?)?;
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], array::reduce_to_shape(&g, self.shape(*b))?)?;
                    }
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = array::broadcast_mul_backward(self.value(*a), self.value(*b), &g)?;
                    if wants(*a) {
                        accumulate(&mut grads[a.0], ga)?;
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], gb)?;
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads[x.0], g.map(|v| v * s))?;
                }
                Op::Silu(x) => {
                    let gx = self.value(*x).zip_map(&g, |v, gv| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })?;
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Sigmoid(x) => {
                    let gx = node.value.zip_map(&g, |s, gv| gv * s * (T::one() - s))?;
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Gelu(x) => {
                    let half = T::from_f64(0.5);
                    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::from_f64(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                    let gx = self.value(*x).zip_map(&g, |v, gv| {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        gv * (cdf + v * pdf)
                    })?;
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (gx, gg, gb) = norm::group_norm_backward(self.value(*x), self.value(*gamma), *groups, stats, &g)?;
                    if wants(*x) {
                        accumulate(&mut grads[x.0], gx)?;
                    }
                    if wants(*gamma) {
                        accumulate(&mut grads[gamma.0], gg.reshape(self.shape(*gamma))?)?;
                    }
                    if wants(*beta) {
                        accumulate(&mut grads[beta.0], gb.reshape(self.shape(*beta))?)?;
                    }
                }
                Op::ChannelNorm { x, gamma, beta, stats } => {
                    let (gx, gg, gb) = norm::channel_norm_backward(self.value(*x), self.value(*gamma), stats, &g)?;
                    if wants(*x) {
                        accumulate(&mut grads[x.0], gx)?;
                    }
                    if wants(*gamma) {
                        accumulate(&mut grads[gamma.0], gg.reshape(self.shape(*gamma))?)?;
                    }
                    if wants(*beta) {
                        accumulate(&mut grads[beta.0], gb.reshape(self.shape(*beta))?)?;
                    }
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.shape(*p)[*axis];
                        if wants(*p) {
                            accumulate(&mut grads[p.0], array::narrow(&g, *axis, start, len)?)?;
                        }
                        start += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let slot = &mut grads[x.0];
                    if slot.is_none() {
                        *slot = Some(Tensor::zeros(self.shape(*x)));
                    }
                    if let Some(acc) = slot.as_mut() {
                        array::narrow_backward_add(acc, &g, *axis, *start);
                    }
                }
                Op::Reshape(x) => {
                    accumulate(&mut grads[x.0], g.reshape(self.shape(*x))?)?;
                }
                Op::MaxPool { x, arg } => {
                    accumulate(&mut grads[x.0], spatial::max_pool2d_backward(self.shape(*x), arg, &g))?;
                }
                Op::Mean { x } => {
                    accumulate(&mut grads[x.0], array::mean_keepdim_backward(&g, self.shape(*x))?)?;
                }
                Op::Upsample2x(x) => {
                    accumulate(&mut grads[x.0], spatial::upsample2x_backward(&g)?)?;
                }
                Op::Softmax { x, axis } => {
                    accumulate(&mut grads[x.0], array::softmax_backward(&node.value, &g, *axis))?;
                }
                Op::BatchMatMul(a, b) => {
                    let (ga, gb) = array::batch_matmul_backward(self.value(*a), self.value(*b), &g)?;
                    if wants(*a) {
                        accumulate(&mut grads[a.0], ga)?;
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], gb)?;
                    }
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads[x.0], array::transpose_last2(&g)?)?;
                }
                Op::DynConv { x, kernels, k } => {
                    let (gx, gk) = spatial::dynamic_conv_backward(self.value(*x), self.value(*kernels), *k, &g)?;
                    if wants(*x) {
                        accumulate(&mut grads[x.0], gx)?;
                    }
                    if wants(*kernels) {
                        accumulate(&mut grads[kernels.0], gk)?;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of a graph-building closure with respect to its
    /// (single) input.
    fn check_op(shape: &[usize], build: impl Fn(&mut Graph<'_, f64>, Var) -> Var) {
        let store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5));
        let eval = |x: Tensor<f64>| {
            let mut g = Graph::new(&store);
            let v = g.leaf(x);
            let y = build(&mut g, v);
            let r = Tensor::from_fn(g.shape(y), |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
            (g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>(), r)
        };
        let mut g = Graph::new(&store);
        let v = g.leaf(x.clone());
        let y = build(&mut g, v);
        let (_, seed) = eval(x.clone());
        let grads = g.backward(vec![(y, seed)]).unwrap();
        let analytic = grads.leaf(v).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(xp).0 - eval(xm).0) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn elementwise_and_shape_ops_have_correct_gradients() {
        check_op(&[2, 3, 2, 2], |g, x| g.silu(x));
        check_op(&[2, 3, 2, 2], |g, x| g.gelu(x));
        check_op(&[2, 3, 2, 2], |g, x| g.sigmoid(x));
        check_op(&[2, 3, 3, 2], |g, x| g.softmax(x, 1).unwrap());
        check_op(&[1, 2, 4, 4], |g, x| g.upsample2x(x).unwrap());
        check_op(&[1, 2, 3, 4], |g, x| g.mean(x, &[3]).unwrap());
        check_op(&[2, 4, 3, 3], |g, x| {
            let parts = g.split(x, 1, &[1, 3]).unwrap();
            let s = g.sigmoid(parts[0]);
            let m = g.mul(parts[1], s).unwrap();
            g.concat(&[m, parts[0]], 1).unwrap()
        });
        check_op(&[2, 3, 4], |g, x| {
            let xt = g.reshape(x, &[2, 4, 3]).unwrap();
            g.batch_matmul(x, xt).unwrap()
        });
        check_op(&[2, 3, 4], |g, x| {
            let xt = g.transpose(x).unwrap();
            let s = g.sigmoid(x);
            g.batch_matmul(xt, s).unwrap()
        });
    }

    #[test]
    fn norm_and_conv_gradients() {
        let store_shape = [2usize, 4, 3, 3];
        check_op(&store_shape, |g, x| {
            let gamma = g.input(Tensor::from_fn(&[4], |i| 1.0 + i as f64 * 0.1));
            let beta = g.input(Tensor::from_fn(&[4], |i| i as f64 * -0.2));
            g.group_norm(x, gamma, beta, 2, 1e-5).unwrap()
        });
        check_op(&store_shape, |g, x| {
            let gamma = g.input(Tensor::from_fn(&[4], |i| 1.0 + i as f64 * 0.1));
            let beta = g.input(Tensor::from_fn(&[4], |i| i as f64 * -0.2));
            g.channel_norm(x, gamma, beta, 1e-6).unwrap()
        });
        check_op(&[1, 4, 5, 5], |g, x| {
            let w = g.input(Tensor::from_fn(&[4, 2, 3, 3], |i| ((i % 7) as f64 - 3.0) * 0.1));
            g.conv2d(x, w, None, ConvSpec::new(2, 1, 2)).unwrap()
        });
        check_op(&[1, 2, 5, 5], |g, x| {
            let k = g.input(Tensor::from_fn(&[1, 1, 9, 5, 5], |i| ((i % 5) as f64 - 2.0) * 0.3));
            g.dynamic_conv(x, k, 3).unwrap()
        });
        check_op(&[1, 2, 4, 4], |g, x| g.max_pool2d(x, 3, 1, 1).unwrap());
    }

    #[test]
    fn dynamic_conv_kernel_gradient() {
        let store = ParamStore::<f64>::new();
        let x = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f64 * 0.13).sin());
        let k0 = Tensor::from_fn(&[1, 2, 9, 4, 4], |i| (i as f64 * 0.07).cos());
        let f = |k: Tensor<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let kv = g.leaf(k);
            let y = g.dynamic_conv(xv, kv, 3).unwrap();
            let s: f64 = g.value(y).data().iter().enumerate().map(|(i, v)| v * (i % 3) as f64).sum();
            (g, kv, y, s)
        };
        let (g, kv, y, _) = f(k0.clone());
        let seed = Tensor::from_fn(g.shape(y), |i| (i % 3) as f64);
        let grads = g.backward(vec![(y, seed)]).unwrap();
        let gk = grads.leaf(kv).unwrap();
        for i in (0..k0.numel()).step_by(7) {
            let mut kp = k0.clone();
            kp.data_mut()[i] += 1e-6;
            let mut km = k0.clone();
            km.data_mut()[i] -= 1e-6;
            let fd = (f(kp).3 - f(km).3) / 2e-6;
            assert!((gk.data()[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn inference_graph_does_not_track_params() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = g.param(id);
        let y = g.conv2d(x, w, None, ConvSpec::new(1, 0, 1)).unwrap();
        let grads = g.backward(vec![(y, Tensor::full(&[1, 1, 2, 2], 1.0))]).unwrap();
        assert!(grads.param(id).is_none());
    }
}
