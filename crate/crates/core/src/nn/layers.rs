//! Small parameterized layers shared by the detector and the classifier.
//!
//! Layers hold parameter ids rather than tensors, so one layer description can
//! run against an `f32` store for training or an `f64` copy for gradient checks.

use crate::error::{Error, Result};
use crate::nn::graph::{ConvSpec, Graph, Var};
use crate::nn::params::{ParamBuilder, ParamId};
use crate::tensor::Scalar;

/// Group count for a group norm over `c` channels: the largest of
/// 32, 16, ..., 1 that divides `c` while keeping at least two channels per
/// group where possible.
pub fn norm_groups(c: usize) -> usize {
    [32, 16, 8, 4, 2, 1].into_iter().find(|&g| c % g == 0 && (c / g >= 2 || g == 1)).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!("conv {c_in}->{c_out} with {groups} groups")));
        }
        let weight = pb.weight("weight", &[c_out, c_in / groups, k, k])?;
        let bias = if bias {
            let fan_in = (c_in / groups * k * k) as f64;
            Some(pb.uniform("bias", &[c_out], 1.0 / fan_in.sqrt())?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec: ConvSpec::new(stride, k / 2, groups), c_in, c_out, k })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Self::with_groups(pb, c, norm_groups(c))
    }

    pub fn with_groups<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize, groups: usize) -> Result<Self> {
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("group norm: {c} channels in {groups} groups")));
        }
        Ok(Self { gamma: pb.ones("gamma", &[1, c, 1, 1])?, beta: pb.zeros("beta", &[1, c, 1, 1])?, groups })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

/// Layer norm over the channels of each pixel.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self { gamma: pb.ones("gamma", &[1, c, 1, 1])?, beta: pb.zeros("beta", &[1, c, 1, 1])? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.channel_norm(x, gamma, beta, Self::EPS)
    }
}

/// Convolution, group norm and optional SiLU: the standard detector unit.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub act: bool,
}

impl ConvNormAct {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_groups(pb, c_in, c_out, k, stride, 1, true)
    }

    pub fn with_groups<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: bool,
    ) -> Result<Self> {
        let conv = Conv2d::new(&mut pb.sub("conv"), c_in, c_out, k, stride, groups, false)?;
        let norm = GroupNorm::new(&mut pb.sub("norm"), c_out)?;
        Ok(Self { conv, norm, act })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(if self.act { g.silu(y) } else { y })
    }
}
