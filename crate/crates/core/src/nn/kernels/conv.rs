//! 2-D convolution in NCHW layout: im2col + GEMM for dense and grouped kernels,
//! direct loops for depthwise kernels.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatLayout, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let (batch, cin, h, w) = x.dims4()?;
        let (cout, cin_g, kh, kw) = weight.dims4()?;
        let g = spec.groups;
        if g == 0 || spec.stride == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} weight {:?} groups {g}",
                x.shape(),
                weight.shape()
            )));
        }
        if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (w + 2 * spec.pad - kw) / spec.stride + 1;
        Ok(Self { batch, cin, h, w, cout, kh, kw, ho, wo, cin_g, cout_g: cout / g })
    }

    fn is_pointwise(&self, spec: ConvSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec.stride == 1 && spec.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }
}

/// Range of output indices `o` for which `o * stride + k - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o * stride + k - pad <= len - 1  =>  o <= (len - 1 + pad - k) / stride
    let hi = if len + pad > k { ((len - 1 + pad - k) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec, ho: usize, wo: usize, col: &mut [T]) {
    let n = ho * wo;
    let (s, p) = (spec.stride, spec.pad);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ho, h, ky, s, p);
            for kx in 0..kw {
                let row = &mut col[((ci * kh + ky) * kw + kx) * n..][..n];
                row.fill(T::zero());
                let (ox0, ox1) = valid_range(wo, w, kx, s, p);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let src_row = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let ix0 = ox0 + kx - p;
                        dst[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src_row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec, ho: usize, wo: usize, dst: &mut [T]) {
    let n = ho * wo;
    let (s, p) = (spec.stride, spec.pad);
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ho, h, ky, s, p);
            for kx in 0..kw {
                let row = &col[((ci * kh + ky) * kw + kx) * n..][..n];
                let (ox0, ox1) = valid_range(wo, w, kx, s, p);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    let srow = &row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        drow[ox * s + kx - p] += srow[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
    let geo = Geometry::new(x, weight, spec)?;
    if let Some(b) = bias {
        if b.numel() != geo.cout {
            return Err(Error::Shape(format!("conv2d: bias {:?} for {} outputs", b.shape(), geo.cout)));
        }
    }
    let mut out = Tensor::zeros(&[geo.batch, geo.cout, geo.ho, geo.wo]);
    if geo.is_depthwise() {
        depthwise_forward(x.data(), weight.data(), &geo, spec, out.data_mut());
    } else {
        dense_forward(x.data(), weight.data(), &geo, spec, out.data_mut());
    }
    if let Some(b) = bias {
        let n = geo.ho * geo.wo;
        for (i, plane) in out.data_mut().chunks_mut(n).enumerate() {
            let bv = b.data()[i % geo.cout];
            for v in plane {
                *v += bv;
            }
        }
    }
    Ok(out)
}

fn dense_forward<T: Scalar>(x: &[T], w: &[T], geo: &Geometry, spec: ConvSpec, out: &mut [T]) {
    let n = geo.ho * geo.wo;
    let k = geo.cin_g * geo.kh * geo.kw;
    let pointwise = geo.is_pointwise(spec);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..geo.batch {
        for g in 0..spec.groups {
            let src = &x[(b * geo.cin + g * geo.cin_g) * geo.h * geo.w..][..geo.cin_g * geo.h * geo.w];
            let wg = &w[g * geo.cout_g * k..][..geo.cout_g * k];
            let dst = &mut out[(b * geo.cout + g * geo.cout_g) * n..][..geo.cout_g * n];
            let rhs: &[T] = if pointwise {
                src
            } else {
                im2col(src, geo.cin_g, geo.h, geo.w, geo.kh, geo.kw, spec, geo.ho, geo.wo, &mut col);
                &col
            };
            gemm(geo.cout_g, k, n, T::one(), wg, MatLayout::row_major(k), rhs, MatLayout::row_major(n), T::zero(), dst);
        }
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], geo: &Geometry, spec: ConvSpec, out: &mut [T]) {
    let (s, p) = (spec.stride, spec.pad);
    let (h, wd, ho, wo, kh, kw) = (geo.h, geo.w, geo.ho, geo.wo, geo.kh, geo.kw);
    for b in 0..geo.batch {
        for c in 0..geo.cin {
            let plane = &x[(b * geo.cin + c) * h * wd..][..h * wd];
            let dst = &mut out[(b * geo.cout + c) * ho * wo..][..ho * wo];
            let kern = &w[c * kh * kw..][..kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ho, h, ky, s, p);
                for kx in 0..kw {
                    let wv = kern[ky * kw + kx];
                    let (ox0, ox1) = valid_range(wo, wd, kx, s, p);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let srow = &plane[iy * wd..(iy + 1) * wd];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let off = kx as isize - p as isize;
                            for ox in ox0..ox1 {
                                drow[ox] += wv * srow[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] += wv * srow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution. Returns `(grad_input, grad_weight, grad_bias)`;
/// `grad_input` is only computed when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: ConvSpec,
    gy: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let geo = Geometry::new(x, weight, spec)?;
    if gy.shape() != [geo.batch, geo.cout, geo.ho, geo.wo] {
        return Err(Error::Shape(format!("conv2d backward: grad {:?}", gy.shape())));
    }
    let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut gw = Tensor::zeros(weight.shape());
    let n = geo.ho * geo.wo;
    let mut gb = Tensor::zeros(&[geo.cout]);
    for (i, plane) in gy.data().chunks(n).enumerate() {
        gb.data_mut()[i % geo.cout] += plane.iter().copied().sum::<T>();
    }
    if geo.is_depthwise() {
        depthwise_backward(x.data(), weight.data(), &geo, spec, gy.data(), gx.as_mut().map(|t| t.data_mut()), gw.data_mut());
    } else {
        dense_backward(x.data(), weight.data(), &geo, spec, gy.data(), gx.as_mut().map(|t| t.data_mut()), gw.data_mut());
    }
    Ok((gx, gw, gb))
}

fn dense_backward<T: Scalar>(x: &[T], w: &[T], geo: &Geometry, spec: ConvSpec, gy: &[T], mut gx: Option<&mut [T]>, gw: &mut [T]) {
    let n = geo.ho * geo.wo;
    let k = geo.cin_g * geo.kh * geo.kw;
    let pointwise = geo.is_pointwise(spec);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * n] };
    let mut gcol = if pointwise || gx.is_none() { Vec::new() } else { vec![T::zero(); k * n] };
    let plane_len = geo.cin_g * geo.h * geo.w;
    for b in 0..geo.batch {
        for g in 0..spec.groups {
            let src_off = (b * geo.cin + g * geo.cin_g) * geo.h * geo.w;
            let src = &x[src_off..][..plane_len];
            let wg = &w[g * geo.cout_g * k..][..geo.cout_g * k];
            let gyg = &gy[(b * geo.cout + g * geo.cout_g) * n..][..geo.cout_g * n];
            let rhs: &[T] = if pointwise {
                src
            } else {
                im2col(src, geo.cin_g, geo.h, geo.w, geo.kh, geo.kw, spec, geo.ho, geo.wo, &mut col);
                &col
            };
            let gwg = &mut gw[g * geo.cout_g * k..][..geo.cout_g * k];
            gemm(geo.cout_g, n, k, T::one(), gyg, MatLayout::row_major(n), rhs, MatLayout::transposed(n), T::one(), gwg);
            if let Some(gx) = gx.as_deref_mut() {
                let dst = &mut gx[src_off..][..plane_len];
                if pointwise {
                    gemm(k, geo.cout_g, n, T::one(), wg, MatLayout::transposed(k), gyg, MatLayout::row_major(n), T::one(), dst);
                } else {
                    gemm(k, geo.cout_g, n, T::one(), wg, MatLayout::transposed(k), gyg, MatLayout::row_major(n), T::zero(), &mut gcol);
                    col2im_add(&gcol, geo.cin_g, geo.h, geo.w, geo.kh, geo.kw, spec, geo.ho, geo.wo, dst);
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(x: &[T], w: &[T], geo: &Geometry, spec: ConvSpec, gy: &[T], mut gx: Option<&mut [T]>, gw: &mut [T]) {
    let (s, p) = (spec.stride, spec.pad);
    let (h, wd, ho, wo, kh, kw) = (geo.h, geo.w, geo.ho, geo.wo, geo.kh, geo.kw);
    for b in 0..geo.batch {
        for c in 0..geo.cin {
            let plane = &x[(b * geo.cin + c) * h * wd..][..h * wd];
            let g = &gy[(b * geo.cout + c) * ho * wo..][..ho * wo];
            let kern = &w[c * kh * kw..][..kh * kw];
            let gkern = &mut gw[c * kh * kw..][..kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ho, h, ky, s, p);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(wo, wd, kx, s, p);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let srow = &plane[iy * wd..(iy + 1) * wd];
                        let grow = &g[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * srow[ox * s + kx - p];
                        }
                    }
                    gkern[ky * kw + kx] += acc;
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = kern[ky * kw + kx];
                        let gplane = &mut gx[(b * geo.cin + c) * h * wd..][..h * wd];
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let drow = &mut gplane[iy * wd..(iy + 1) * wd];
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                drow[ox * s + kx - p] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
