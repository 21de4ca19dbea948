//! Shape-generic tensor kernels: broadcasting, reductions, softmax, batched
//! matmul, concatenation and slicing.

use crate::error::{Error, Result};
use crate::tensor::{gemm, split_axis, strides, MatLayout, Scalar, Tensor};

/// Output shape of a same-rank broadcast between `a` and `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("broadcast rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(out).zip(s).map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st }).collect()
}

/// Visits every output index of a broadcast, passing `(out, a, b)` linear offsets.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut oi = 0;
    loop {
        let base_a: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let base_b: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(oi + j, base_a + j * ia, base_b + j * ib);
        }
        oi += inner;
        // advance all but the innermost axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut res = Tensor::zeros(&out);
    let (ad, bd) = (a.data(), b.data());
    let rd = res.data_mut();
    for_each_broadcast(&out, &sa, &sb, |o, i, j| rd[o] = f(ad[i], bd[j]));
    Ok(res)
}

/// Sums `g` down to `shape`, the inverse of broadcasting `shape` up to `g.shape()`.
pub fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let check = broadcast_shape(shape, g.shape())?;
    if check != g.shape() {
        return Err(Error::Shape(format!("cannot reduce {:?} to {shape:?}", g.shape())));
    }
    let st = broadcast_strides(shape, g.shape());
    let ident = strides(g.shape());
    let mut res = Tensor::zeros(shape);
    let gd = g.data();
    let rd = res.data_mut();
    for_each_broadcast(g.shape(), &ident, &st, |_, i, j| rd[j] += gd[i]);
    Ok(res)
}

/// Gradients of `a * b` under broadcasting.
pub fn broadcast_mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let out = gy.shape();
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), gy.data());
    {
        let gad = ga.data_mut();
        let gbd = gb.data_mut();
        for_each_broadcast(out, &sa, &sb, |o, i, j| {
            gad[i] += gd[o] * bd[j];
            gbd[j] += gd[o] * ad[i];
        });
    }
    Ok((ga, gb))
}

/// Mean over `axes`, keeping them as size-1 dimensions.
pub fn mean_keepdim<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let mut shape = x.shape().to_vec();
    let mut count = 1usize;
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::Shape(format!("mean axis {a} out of range for {:?}", x.shape())));
        }
        count *= shape[a];
        shape[a] = 1;
    }
    let mut r = reduce_to_shape(x, &shape)?;
    r.scale(T::one() / T::from_f64(count as f64));
    Ok(r)
}

/// Broadcasts `g` (the gradient of a keep-dim mean) back to `shape`.
pub fn mean_keepdim_backward<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let count: usize = shape.iter().product::<usize>() / g.numel().max(1);
    let ones = Tensor::full(shape, T::one() / T::from_f64(count as f64));
    broadcast_binary(&ones, g, |a, b| a * b)
}

pub fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("softmax axis {axis} for {:?}", x.shape())));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for o in 0..outer {
        for n in 0..inner {
            let at = |i: usize| (o * len + i) * inner + n;
            let mut m = T::neg_infinity();
            for i in 0..len {
                m = m.max(xd[at(i)]);
            }
            let mut s = T::zero();
            for i in 0..len {
                let e = (xd[at(i)] - m).exp();
                yd[at(i)] = e;
                s += e;
            }
            for i in 0..len {
                yd[at(i)] = yd[at(i)] / s;
            }
        }
    }
    Ok(y)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), gy.data());
    let gxd = gx.data_mut();
    for o in 0..outer {
        for n in 0..inner {
            let at = |i: usize| (o * len + i) * inner + n;
            let dot: T = (0..len).map(|i| yd[at(i)] * gd[at(i)]).sum();
            for i in 0..len {
                gxd[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
            }
        }
    }
    gx
}

fn bmm_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(Error::Shape(format!("batch_matmul {a:?} x {b:?}"))),
    }
}

/// `(B, M, K) x (B, K, N) -> (B, M, N)`.
pub fn batch_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k, n) = bmm_dims(a.shape(), b.shape())?;
    let mut out = Tensor::zeros(&[bs, m, n]);
    for i in 0..bs {
        gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * m * k..],
            MatLayout::row_major(k),
            &b.data()[i * k * n..],
            MatLayout::row_major(n),
            T::zero(),
            &mut out.data_mut()[i * m * n..],
        );
    }
    Ok(out)
}

pub fn batch_matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bs, m, k, n) = bmm_dims(a.shape(), b.shape())?;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for i in 0..bs {
        let g = &gy.data()[i * m * n..][..m * n];
        // dA = dY * B^T
        gemm(m, n, k, T::one(), g, MatLayout::row_major(n), &b.data()[i * k * n..], MatLayout::transposed(n), T::zero(), &mut ga.data_mut()[i * m * k..]);
        // dB = A^T * dY
        gemm(k, m, n, T::one(), &a.data()[i * m * k..], MatLayout::transposed(k), g, MatLayout::row_major(n), T::zero(), &mut gb.data_mut()[i * k * n..]);
    }
    Ok((ga, gb))
}

/// Swaps the last two axes of a rank-3 tensor.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, m, n] = *x.shape() else {
        return Err(Error::Shape(format!("transpose expects rank 3, got {:?}", x.shape())));
    };
    let mut y = Tensor::zeros(&[b, n, m]);
    let (xd, yd) = (x.data(), y.data_mut());
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                yd[(bi * n + j) * m + i] = xd[(bi * m + i) * n + j];
            }
        }
    }
    Ok(y)
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::Shape(format!("concat axis {axis} for rank {rank}")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == rank && p.shape().iter().enumerate().all(|(i, &d)| i == axis || d == first.shape()[i]);
        if !ok {
            return Err(Error::Shape(format!("concat {:?} with {:?} on axis {axis}", first.shape(), p.shape())));
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, total, inner) = split_axis(&shape, axis);
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    let mut start = 0;
    for p in parts {
        let len = p.shape()[axis];
        for o in 0..outer {
            let src = &p.data()[o * len * inner..(o + 1) * len * inner];
            od[(o * total + start) * inner..][..len * inner].copy_from_slice(src);
        }
        start += len;
    }
    Ok(out)
}

pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::Shape(format!("narrow {start}+{len} on axis {axis} of {:?}", x.shape())));
    }
    let (outer, total, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    for o in 0..outer {
        od[o * len * inner..(o + 1) * len * inner].copy_from_slice(&x.data()[(o * total + start) * inner..][..len * inner]);
    }
    Ok(out)
}

/// Adds `g` (gradient of a narrow) into the matching window of `dst`.
pub fn narrow_backward_add<T: Scalar>(dst: &mut Tensor<T>, g: &Tensor<T>, axis: usize, start: usize) {
    let (outer, total, inner) = split_axis(dst.shape(), axis);
    let len = g.shape()[axis];
    let dd = dst.data_mut();
    for o in 0..outer {
        let d = &mut dd[(o * total + start) * inner..][..len * inner];
        for (a, &b) in d.iter_mut().zip(&g.data()[o * len * inner..(o + 1) * len * inner]) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_mul_matches_manual() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 2, 1], |i| (i + 1) as f64);
        let y = broadcast_binary(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        // element (1,2,1,0) = a[1,2,1,0] * b[1,2,1,0]
        let ai = ((3 + 2) * 2 + 1) * 2;
        let bi = (3 + 2) * 2 + 1;
        assert_eq!(y.data()[ai], a.data()[ai] * b.data()[bi]);
        let r = reduce_to_shape(&y, &[2, 3, 2, 1]).unwrap();
        assert_eq!(r.data()[bi], y.data()[ai] + y.data()[ai + 1]);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_middle_axis() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 3], |i| (i as f64 * 0.7).sin() * 5.0);
        let y = softmax_forward(&x, 1).unwrap();
        for o in 0..2 {
            for n in 0..3 {
                let s: f64 = (0..4).map(|i| y.data()[(o * 4 + i) * 3 + n]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let a = Tensor::<f32>::from_fn(&[2, 3, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 1, 2], |i| 100.0 + i as f32);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        assert_eq!(narrow(&c, 1, 0, 3).unwrap(), a);
        assert_eq!(narrow(&c, 1, 3, 1).unwrap(), b);
    }

    #[test]
    fn mean_over_spatial_axes() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let m = mean_keepdim(&x, &[2, 3]).unwrap();
        assert_eq!(m.shape(), &[1, 2, 1, 1]);
        assert_eq!(m.data(), &[1.5, 5.5]);
    }
}
