//! Group normalization over NCHW and channel-wise layer normalization.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-(sample, group) statistics saved by the forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 || gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!("group_norm: {c} channels, {groups} groups")));
    }
    let cg = c / groups;
    let hw = h * w;
    let m = cg * hw;
    let eps = T::from_f64(eps);
    let mut y = Tensor::zeros(x.shape());
    let mut stats = NormStats { mean: Vec::with_capacity(b * groups), rstd: Vec::with_capacity(b * groups) };
    let inv_m = T::one() / T::from_f64(m as f64);
    for bi in 0..b {
        for g in 0..groups {
            let off = (bi * c + g * cg) * hw;
            let xs = &x.data()[off..off + m];
            let mean = xs.iter().copied().sum::<T>() * inv_m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let rstd = T::one() / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            let ys = &mut y.data_mut()[off..off + m];
            for ci in 0..cg {
                let ch = g * cg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for j in ci * hw..(ci + 1) * hw {
                    ys[j] = (xs[j] - mean) * rstd * ga + be;
                }
            }
        }
    }
    Ok((y, stats))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    stats: &NormStats<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let cg = c / groups;
    let hw = h * w;
    let m = cg * hw;
    let mf = T::from_f64(m as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for bi in 0..b {
        for g in 0..groups {
            let idx = bi * groups + g;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let off = (bi * c + g * cg) * hw;
            let xs = &x.data()[off..off + m];
            let gys = &gy.data()[off..off + m];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let ga = gamma.data()[ch];
                let mut acc_g = T::zero();
                let mut acc_b = T::zero();
                for j in ci * hw..(ci + 1) * hw {
                    let xhat = (xs[j] - mean) * rstd;
                    acc_g += gys[j] * xhat;
                    acc_b += gys[j];
                    let d = gys[j] * ga;
                    sum_d += d;
                    sum_dx += d * xhat;
                }
                gg.data_mut()[ch] += acc_g;
                gb.data_mut()[ch] += acc_b;
            }
            let gxs = &mut gx.data_mut()[off..off + m];
            for ci in 0..cg {
                let ga = gamma.data()[g * cg + ci];
                for j in ci * hw..(ci + 1) * hw {
                    let xhat = (xs[j] - mean) * rstd;
                    gxs[j] = rstd / mf * (mf * gys[j] * ga - sum_d - xhat * sum_dx);
                }
            }
        }
    }
    Ok((gx, gg, gb))
}

/// Layer normalization across the channel axis of an NCHW tensor, independently
/// at every spatial position (the "channels-last" norm of ConvNeXt).
pub fn channel_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!("channel_norm: {c} channels, affine {}", gamma.numel())));
    }
    let hw = h * w;
    let eps = T::from_f64(eps);
    let inv_c = T::one() / T::from_f64(c as f64);
    let mut y = Tensor::zeros(x.shape());
    let mut stats = NormStats { mean: vec![T::zero(); b * hw], rstd: vec![T::zero(); b * hw] };
    let mut var = vec![T::zero(); hw];
    for bi in 0..b {
        let xs = &x.data()[bi * c * hw..(bi + 1) * c * hw];
        let mean = &mut stats.mean[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xs[ci * hw..(ci + 1) * hw]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_c;
        }
        var.fill(T::zero());
        for ci in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xs[ci * hw..(ci + 1) * hw]).zip(mean.iter()) {
                *s += (v - m) * (v - m);
            }
        }
        let rstd = &mut stats.rstd[bi * hw..(bi + 1) * hw];
        for (r, &s) in rstd.iter_mut().zip(&var) {
            *r = T::one() / (s * inv_c + eps).sqrt();
        }
        let ys = &mut y.data_mut()[bi * c * hw..(bi + 1) * c * hw];
        for ci in 0..c {
            let (ga, be) = (gamma.data()[ci], beta.data()[ci]);
            for j in 0..hw {
                ys[ci * hw + j] = (xs[ci * hw + j] - mean[j]) * rstd[j] * ga + be;
            }
        }
    }
    Ok((y, stats))
}

pub fn channel_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let cf = T::from_f64(c as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    let mut sum_d = vec![T::zero(); hw];
    let mut sum_dx = vec![T::zero(); hw];
    for bi in 0..b {
        let xs = &x.data()[bi * c * hw..(bi + 1) * c * hw];
        let gys = &gy.data()[bi * c * hw..(bi + 1) * c * hw];
        let mean = &stats.mean[bi * hw..(bi + 1) * hw];
        let rstd = &stats.rstd[bi * hw..(bi + 1) * hw];
        sum_d.fill(T::zero());
        sum_dx.fill(T::zero());
        for ci in 0..c {
            let ga = gamma.data()[ci];
            let mut acc_g = T::zero();
            let mut acc_b = T::zero();
            for j in 0..hw {
                let xhat = (xs[ci * hw + j] - mean[j]) * rstd[j];
                let g = gys[ci * hw + j];
                acc_g += g * xhat;
                acc_b += g;
                sum_d[j] += g * ga;
                sum_dx[j] += g * ga * xhat;
            }
            gg.data_mut()[ci] += acc_g;
            gb.data_mut()[ci] += acc_b;
        }
        let gxs = &mut gx.data_mut()[bi * c * hw..(bi + 1) * c * hw];
        for ci in 0..c {
            let ga = gamma.data()[ci];
            for j in 0..hw {
                let xhat = (xs[ci * hw + j] - mean[j]) * rstd[j];
                gxs[ci * hw + j] = rstd[j] / cf * (cf * gys[ci * hw + j] * ga - sum_d[j] - xhat * sum_dx[j]);
            }
        }
    }
    Ok((gx, gg, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_norm_output_is_standardized() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |i| (i as f64 * 0.37).sin() * 3.0 + 1.0);
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let (y, _) = group_norm_forward(&x, &ones, &zeros, 2, 1e-5).unwrap();
        for chunk in y.data().chunks(18) {
            let mean: f64 = chunk.iter().sum::<f64>() / 18.0;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn channel_norm_standardizes_each_pixel() {
        let x = Tensor::<f64>::from_fn(&[1, 5, 2, 2], |i| (i as f64 * 1.3).cos() * 2.0);
        let ones = Tensor::full(&[5], 1.0);
        let zeros = Tensor::zeros(&[5]);
        let (y, _) = channel_norm_forward(&x, &ones, &zeros, 1e-6).unwrap();
        for p in 0..4 {
            let vals: Vec<f64> = (0..5).map(|c| y.data()[c * 4 + p]).collect();
            let mean = vals.iter().sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_normalizes_to_beta() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        let gamma = Tensor::full(&[4], 2.0);
        let beta = Tensor::zeros(&[4]);
        let (y, _) = group_norm_forward(&x, &gamma, &beta, 4, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
