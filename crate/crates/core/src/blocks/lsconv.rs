use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvNormAct, GroupNorm};
use crate::nn::{Graph, ParamBuilder, Var};
use crate::tensor::Scalar;

use super::BlockConfig;

/// Large-kernel perception, small-kernel aggregation convolution.
///
/// A pointwise reduction followed by a large depthwise convolution summarizes
/// context around every pixel. A pointwise projection of that context predicts,
/// per pixel and per channel group, a small `k x k` kernel (softmax over the
/// kernel taps). The input is aggregated with those kernels, mixed pointwise,
/// normalized and added back to the input.
#[derive(Clone, Debug)]
pub struct LsConv {
    pub channels: usize,
    pub groups: usize,
    pub small_kernel: usize,
    reduce: ConvNormAct,
    large: ConvNormAct,
    kernel_gen: Conv2d,
    mix: Conv2d,
    norm: GroupNorm,
}

impl LsConv {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let groups = (c / cfg.lsconv_group_channels).max(1);
        if c % groups != 0 {
            return Err(Error::Config(format!("LSConv: {c} channels cannot form {groups} kernel groups")));
        }
        let cr = (c / 2).max(1);
        let (lk, sk) = (cfg.lsconv_large_kernel, cfg.lsconv_small_kernel);
        Ok(Self {
            channels: c,
            groups,
            small_kernel: sk,
            reduce: ConvNormAct::new(&mut pb.sub("reduce"), c, cr, 1, 1)?,
            large: ConvNormAct::with_groups(&mut pb.sub("large"), cr, cr, lk, 1, cr, true)?,
            kernel_gen: Conv2d::new(&mut pb.sub("kernel_gen"), cr, groups * sk * sk, 1, 1, 1, true)?,
            mix: Conv2d::new(&mut pb.sub("mix"), c, c, 1, 1, 1, false)?,
            norm: GroupNorm::new(&mut pb.sub("norm"), c)?,
        })
    }

    /// Per-pixel kernels `(B, groups, k*k, H, W)`, each summing to one.
    pub fn kernels<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let [b, c, h, w] = *g.shape(x) else {
            return Err(Error::Shape(format!("LSConv expects NCHW, got {:?}", g.shape(x))));
        };
        if c != self.channels {
            return Err(Error::Shape(format!("LSConv built for {} channels, got {c}", self.channels)));
        }
        let ctx = self.reduce.forward(g, x)?;
        let ctx = self.large.forward(g, ctx)?;
        let logits = self.kernel_gen.forward(g, ctx)?;
        let k2 = self.small_kernel * self.small_kernel;
        let logits = g.reshape(logits, &[b, self.groups, k2, h, w])?;
        g.softmax(logits, 2)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let kernels = self.kernels(g, x)?;
        let agg = g.dynamic_conv(x, kernels, self.small_kernel)?;
        let y = self.mix.forward(g, agg)?;
        let y = self.norm.forward(g, y)?;
        g.add(x, y)
    }
}
