use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, GroupNorm};
use crate::nn::{Graph, ParamBuilder, Var};
use crate::tensor::Scalar;

use super::BlockConfig;

/// Efficient multi-scale attention.
///
/// Channels are folded into `groups` sub-batches. A 1x1 branch gates each
/// group with directional (row and column) pooled descriptors, a 3x3 branch
/// captures local context, and the two branches attend to each other through
/// softmaxed global descriptors. The result is a per-pixel gate in (0, 1) that
/// rescales the input.
#[derive(Clone, Debug)]
pub struct Ema {
    pub channels: usize,
    pub groups: usize,
    conv1x1: Conv2d,
    conv3x3: Conv2d,
    gn: GroupNorm,
}

impl Ema {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, groups) = (cfg.channels, cfg.ema_groups);
        if c % groups != 0 {
            return Err(Error::Config(format!("EMA: {c} channels not divisible by {groups} groups")));
        }
        let cg = c / groups;
        Ok(Self {
            channels: c,
            groups,
            conv1x1: Conv2d::new(&mut pb.sub("conv1x1"), cg, cg, 1, 1, 1, true)?,
            conv3x3: Conv2d::new(&mut pb.sub("conv3x3"), cg, cg, 3, 1, 1, true)?,
            gn: GroupNorm::with_groups(&mut pb.sub("gn"), cg, cg)?,
        })
    }

    /// The sigmoid gate, shaped `(B * groups, 1, H, W)`.
    pub fn gate<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let [b, c, h, w] = *g.shape(x) else {
            return Err(Error::Shape(format!("EMA expects NCHW, got {:?}", g.shape(x))));
        };
        if c != self.channels {
            return Err(Error::Shape(format!("EMA built for {} channels, got {c}", self.channels)));
        }
        let (bg, cg) = (b * self.groups, c / self.groups);
        let gx = g.reshape(x, &[bg, cg, h, w])?;
        let x_h = g.mean(gx, &[3])?;
        let x_w = g.mean(gx, &[2])?;
        let x_w = g.reshape(x_w, &[bg, cg, w, 1])?;
        let cat = g.concat(&[x_h, x_w], 2)?;
        let hw = self.conv1x1.forward(g, cat)?;
        let parts = g.split(hw, 2, &[h, w])?;
        let a_h = g.sigmoid(parts[0]);
        let a_w = g.reshape(parts[1], &[bg, cg, 1, w])?;
        let a_w = g.sigmoid(a_w);
        let x1 = g.mul(gx, a_h)?;
        let x1 = g.mul(x1, a_w)?;
        let x1 = self.gn.forward(g, x1)?;
        let x2 = self.conv3x3.forward(g, gx)?;
        let x11 = g.mean(x1, &[2, 3])?;
        let x11 = g.reshape(x11, &[bg, 1, cg])?;
        let x11 = g.softmax(x11, 2)?;
        let x12 = g.reshape(x2, &[bg, cg, h * w])?;
        let x21 = g.mean(x2, &[2, 3])?;
        let x21 = g.reshape(x21, &[bg, 1, cg])?;
        let x21 = g.softmax(x21, 2)?;
        let x22 = g.reshape(x1, &[bg, cg, h * w])?;
        let w1 = g.batch_matmul(x11, x12)?;
        let w2 = g.batch_matmul(x21, x22)?;
        let weights = g.add(w1, w2)?;
        let weights = g.reshape(weights, &[bg, 1, h, w])?;
        Ok(g.sigmoid(weights))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let gate = self.gate(g, x)?;
        let (bg, cg) = (shape[0] * self.groups, shape[1] / self.groups);
        let gx = g.reshape(x, &[bg, cg, shape[2], shape[3]])?;
        let y = g.mul(gx, gate)?;
        g.reshape(y, &shape)
    }
}
