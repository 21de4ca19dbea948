//! Spatial kernels: max pooling, nearest upsampling and per-pixel dynamic
//! (content-generated) convolution.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Max pooling with `-inf` padding. Returns the output and, for each output
/// element, the flat index of the winning input element.
pub fn max_pool2d_forward<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let (b, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("max_pool2d k={k} on {h}x{w}")));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let mut arg = vec![0u32; b * c * ho * wo];
    let xd = x.data();
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = base;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                y.data_mut()[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2d_backward<T: Scalar>(input_shape: &[usize], arg: &[u32], gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let gxd = gx.data_mut();
    for (&i, &g) in arg.iter().zip(gy.data()) {
        gxd[i as usize] += g;
    }
    gx
}

pub fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let mut y = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    let yd = y.data_mut();
    for p in 0..b * c {
        for iy in 0..h {
            let src = &x.data()[(p * h + iy) * w..][..w];
            for dy in 0..2 {
                let dst = &mut yd[(p * 2 * h + 2 * iy + dy) * 2 * w..][..2 * w];
                for (ix, &v) in src.iter().enumerate() {
                    dst[2 * ix] = v;
                    dst[2 * ix + 1] = v;
                }
            }
        }
    }
    Ok(y)
}

pub fn upsample2x_backward<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h2, w2) = gy.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[b, c, h, w]);
    let gd = gy.data();
    let gxd = gx.data_mut();
    for p in 0..b * c {
        for oy in 0..h2 {
            for ox in 0..w2 {
                gxd[(p * h + oy / 2) * w + ox / 2] += gd[(p * h2 + oy) * w2 + ox];
            }
        }
    }
    Ok(gx)
}

fn dyn_dims<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, k: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    match kernels.shape() {
        [kb, g, kk, kh, kw] if *kb == b && *kk == k * k && *kh == h && *kw == w && *g > 0 && c % *g == 0 && k % 2 == 1 => {
            Ok((b, c, h, w, *g))
        }
        s => Err(Error::Shape(format!("dynamic conv: input {:?} kernels {s:?} k={k}", x.shape()))),
    }
}

/// Per-pixel grouped convolution: channel `c` of group `c / (C / G)` at pixel
/// `(y, x)` is filtered with the `k x k` kernel `kernels[b, g, :, y, x]`
/// (zero padding, stride 1, shape-preserving).
pub fn dynamic_conv_forward<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (b, c, h, w, g) = dyn_dims(x, kernels, k)?;
    let cg = c / g;
    let p = k / 2;
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    let (xd, kd) = (x.data(), kernels.data());
    let yd = y.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci / cg;
            let plane = &xd[(bi * c + ci) * hw..][..hw];
            let out = &mut yd[(bi * c + ci) * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let kern = &kd[((bi * g + gi) * k * k + ky * k + kx) * hw..][..hw];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &plane[iy as usize * w..][..w];
                        let krow = &kern[oy * w..][..w];
                        let orow = &mut out[oy * w..][..w];
                        let off = kx as isize - p as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = (w as isize - off).min(w as isize).max(0) as usize;
                        for ox in lo..hi {
                            orow[ox] += krow[ox] * srow[(ox as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(grad_input, grad_kernels)`.
pub fn dynamic_conv_backward<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, k: usize, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w, g) = dyn_dims(x, kernels, k)?;
    let cg = c / g;
    let p = k / 2;
    let hw = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(kernels.shape());
    let (xd, kd, gd) = (x.data(), kernels.data(), gy.data());
    let gkd = gk.data_mut();
    let gxd = gx.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let gi = ci / cg;
            let plane = &xd[(bi * c + ci) * hw..][..hw];
            let grad = &gd[(bi * c + ci) * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let koff = ((bi * g + gi) * k * k + ky * k + kx) * hw;
                    let off = kx as isize - p as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = (w as isize - off).min(w as isize).max(0) as usize;
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in lo..hi {
                            let ix = (ox as isize + off) as usize;
                            let gv = grad[oy * w + ox];
                            gkd[koff + oy * w + ox] += gv * plane[iy * w + ix];
                            gxd[(bi * c + ci) * hw + iy * w + ix] += gv * kd[koff + oy * w + ox];
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gk))
}
