use crate::error::{Error, Result};
use crate::nn::layers::ConvNormAct;
use crate::nn::{Graph, ParamBuilder, Var};
use crate::tensor::Scalar;

use super::{BlockConfig, Ema};

/// Multi-head self-attention over all pixels with a depthwise positional
/// encoding of the values.
#[derive(Clone, Debug)]
pub struct MhsaAttention {
    heads: usize,
    key_dim: usize,
    head_dim: usize,
    qkv: ConvNormAct,
    proj: ConvNormAct,
    pe: ConvNormAct,
}

impl MhsaAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize, heads: usize, attn_ratio: f64) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("attention: {c} channels over {heads} heads")));
        }
        let head_dim = c / heads;
        let key_dim = ((head_dim as f64 * attn_ratio) as usize).max(1);
        let h = c + 2 * key_dim * heads;
        Ok(Self {
            heads,
            key_dim,
            head_dim,
            qkv: ConvNormAct::with_groups(&mut pb.sub("qkv"), c, h, 1, 1, 1, false)?,
            proj: ConvNormAct::with_groups(&mut pb.sub("proj"), c, c, 1, 1, 1, false)?,
            pe: ConvNormAct::with_groups(&mut pb.sub("pe"), c, c, 3, 1, c, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, n) = (shape[0], shape[2] * shape[3]);
        let qkv = self.qkv.forward(g, x)?;
        let per_head = 2 * self.key_dim + self.head_dim;
        let qkv = g.reshape(qkv, &[b * self.heads, per_head, n])?;
        let parts = g.split(qkv, 1, &[self.key_dim, self.key_dim, self.head_dim])?;
        let (q, k, v) = (parts[0], parts[1], parts[2]);
        let qt = g.transpose(q)?;
        let attn = g.batch_matmul(qt, k)?;
        let attn = g.scale(attn, 1.0 / (self.key_dim as f64).sqrt());
        let attn = g.softmax(attn, 2)?;
        let attn_t = g.transpose(attn)?;
        let y = g.batch_matmul(v, attn_t)?;
        let y = g.reshape(y, &shape)?;
        let v_img = g.reshape(v, &shape)?;
        let pe = self.pe.forward(g, v_img)?;
        let y = g.add(y, pe)?;
        self.proj.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub enum PsaAttention {
    Mhsa(MhsaAttention),
    Ema(Ema),
}

/// Residual attention followed by a residual two-layer pointwise FFN.
#[derive(Clone, Debug)]
pub struct PsaBlock {
    pub attn: PsaAttention,
    ffn1: ConvNormAct,
    ffn2: ConvNormAct,
}

impl PsaBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize, use_ema: bool, cfg: &BlockConfig) -> Result<Self> {
        let attn = if use_ema {
            PsaAttention::Ema(Ema::new(&mut pb.sub("ema"), &cfg.with_channels(c))?)
        } else {
            PsaAttention::Mhsa(MhsaAttention::new(&mut pb.sub("attn"), c, (c / 64).max(1), 0.5)?)
        };
        Ok(Self {
            attn,
            ffn1: ConvNormAct::new(&mut pb.sub("ffn1"), c, 2 * c, 1, 1)?,
            ffn2: ConvNormAct::with_groups(&mut pb.sub("ffn2"), 2 * c, c, 1, 1, 1, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = match &self.attn {
            PsaAttention::Mhsa(m) => m.forward(g, x)?,
            PsaAttention::Ema(e) => e.forward(g, x)?,
        };
        let x = g.add(x, a)?;
        let f = self.ffn1.forward(g, x)?;
        let f = self.ffn2.forward(g, f)?;
        g.add(x, f)
    }
}

/// Split into two halves with a pointwise convolution, refine the second half
/// with `n` PSA blocks, concatenate and fuse back to the input width.
#[derive(Clone, Debug)]
pub struct C2psa {
    pub channels: usize,
    pub use_ema: bool,
    half: usize,
    cv1: ConvNormAct,
    cv2: ConvNormAct,
    pub blocks: Vec<PsaBlock>,
}

impl C2psa {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &BlockConfig, use_ema: bool) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        if c % 2 != 0 {
            return Err(Error::Config(format!("C2PSA needs an even channel count, got {c}")));
        }
        let half = c / 2;
        let mut blocks = Vec::with_capacity(cfg.n_psa_blocks);
        for i in 0..cfg.n_psa_blocks {
            blocks.push(PsaBlock::new(&mut pb.sub(format!("m{i}")), half, use_ema, cfg)?);
        }
        Ok(Self {
            channels: c,
            use_ema,
            half,
            cv1: ConvNormAct::new(&mut pb.sub("cv1"), c, c, 1, 1)?,
            cv2: ConvNormAct::new(&mut pb.sub("cv2"), c, c, 1, 1)?,
            blocks,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.shape(x).get(1) != Some(&self.channels) {
            return Err(Error::Shape(format!("C2PSA built for {} channels, got {:?}", self.channels, g.shape(x))));
        }
        let y = self.cv1.forward(g, x)?;
        let parts = g.split(y, 1, &[self.half, self.half])?;
        let mut b = parts[1];
        for blk in &self.blocks {
            b = blk.forward(g, b)?;
        }
        let cat = g.concat(&[parts[0], b], 1)?;
        self.cv2.forward(g, cat)
    }
}
