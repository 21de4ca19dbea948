use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::layers::ConvNormAct;
use crate::nn::{Graph, ParamBuilder, Var};
use crate::tensor::Scalar;

use super::{BlockConfig, LsConv};

/// How the `k x k` convolutions inside bottlenecks are realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    /// Dense convolution with the given kernel size.
    Dense(usize),
    LsConv,
}

/// One spatial convolution slot of a bottleneck.
#[derive(Clone, Debug)]
pub enum Unit {
    Dense(ConvNormAct),
    /// Pointwise projection when the width changes, then LSConv.
    Ls { proj: Option<ConvNormAct>, ls: LsConv },
}

impl Unit {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, kind: ConvKind, cfg: &BlockConfig) -> Result<Self> {
        Ok(match kind {
            ConvKind::Dense(k) => Unit::Dense(ConvNormAct::new(pb, c_in, c_out, k, 1)?),
            ConvKind::LsConv => {
                let proj = if c_in != c_out { Some(ConvNormAct::new(&mut pb.sub("proj"), c_in, c_out, 1, 1)?) } else { None };
                Unit::Ls { proj, ls: LsConv::new(&mut pb.sub("ls"), &cfg.with_channels(c_out))? }
            }
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Unit::Dense(c) => c.forward(g, x),
            Unit::Ls { proj, ls } => {
                let x = match proj {
                    Some(p) => p.forward(g, x)?,
                    None => x,
                };
                ls.forward(g, x)
            }
        }
    }

    fn is_lsconv(&self) -> bool {
        matches!(self, Unit::Ls { .. })
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    cv1: Unit,
    cv2: Unit,
    add: bool,
}

impl Bottleneck {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        c1: usize,
        c2: usize,
        shortcut: bool,
        e: f64,
        kind: ConvKind,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let c_ = ((c2 as f64 * e) as usize).max(1);
        Ok(Self {
            cv1: Unit::new(&mut pb.sub("cv1"), c1, c_, kind, cfg)?,
            cv2: Unit::new(&mut pb.sub("cv2"), c_, c2, kind, cfg)?,
            add: shortcut && c1 == c2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, x)?;
        let y = self.cv2.forward(g, y)?;
        if self.add {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// CSP block with two pointwise branches and a bottleneck stack.
#[derive(Clone, Debug)]
pub struct C3k {
    cv1: ConvNormAct,
    cv2: ConvNormAct,
    cv3: ConvNormAct,
    m: Vec<Bottleneck>,
}

impl C3k {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c1: usize, c2: usize, n: usize, kind: ConvKind, cfg: &BlockConfig) -> Result<Self> {
        let c_ = (c2 / 2).max(1);
        let mut m = Vec::with_capacity(n);
        for i in 0..n {
            m.push(Bottleneck::new(&mut pb.sub(format!("m{i}")), c_, c_, true, 1.0, kind, cfg)?);
        }
        Ok(Self {
            cv1: ConvNormAct::new(&mut pb.sub("cv1"), c1, c_, 1, 1)?,
            cv2: ConvNormAct::new(&mut pb.sub("cv2"), c1, c_, 1, 1)?,
            cv3: ConvNormAct::new(&mut pb.sub("cv3"), 2 * c_, c2, 1, 1)?,
            m,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut a = self.cv1.forward(g, x)?;
        for b in &self.m {
            a = b.forward(g, a)?;
        }
        let b = self.cv2.forward(g, x)?;
        let cat = g.concat(&[a, b], 1)?;
        self.cv3.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub enum C3k2Inner {
    Bottleneck(Bottleneck),
    C3k(C3k),
}

/// Faster CSP block: a pointwise split into two halves, a chain of inner
/// blocks on the second half whose every output is kept, and a pointwise fuse
/// of all kept maps.
#[derive(Clone, Debug)]
pub struct C3k2 {
    pub c_out: usize,
    pub kind: ConvKind,
    hidden: usize,
    cv1: ConvNormAct,
    cv2: ConvNormAct,
    m: Vec<C3k2Inner>,
}

impl C3k2 {
    /// `n` inner blocks; `c3k` selects nested C3k blocks over plain
    /// bottlenecks; `e` is the hidden-width ratio.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        c1: usize,
        c2: usize,
        n: usize,
        c3k: bool,
        e: f64,
        shortcut: bool,
        kind: ConvKind,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let hidden = ((c2 as f64 * e) as usize).max(1);
        let mut m = Vec::with_capacity(n);
        for i in 0..n {
            let mut sub = pb.sub(format!("m{i}"));
            m.push(if c3k {
                C3k2Inner::C3k(C3k::new(&mut sub, hidden, hidden, 2, kind, cfg)?)
            } else {
                C3k2Inner::Bottleneck(Bottleneck::new(&mut sub, hidden, hidden, shortcut, 0.5, kind, cfg)?)
            });
        }
        Ok(Self {
            c_out: c2,
            kind,
            hidden,
            cv1: ConvNormAct::new(&mut pb.sub("cv1"), c1, 2 * hidden, 1, 1)?,
            cv2: ConvNormAct::new(&mut pb.sub("cv2"), (2 + n) * hidden, c2, 1, 1)?,
            m,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, x)?;
        let mut ys = g.split(y, 1, &[self.hidden, self.hidden])?;
        for inner in &self.m {
            let last = *ys.last().expect("split yields two parts");
            ys.push(match inner {
                C3k2Inner::Bottleneck(b) => b.forward(g, last)?,
                C3k2Inner::C3k(c) => c.forward(g, last)?,
            });
        }
        let cat = g.concat(&ys, 1)?;
        self.cv2.forward(g, cat)
    }

    /// True when every inner spatial convolution is an LSConv.
    pub fn uses_lsconv(&self) -> bool {
        let bottleneck_ls = |b: &Bottleneck| b.cv1.is_lsconv() && b.cv2.is_lsconv();
        !self.m.is_empty()
            && self.m.iter().all(|inner| match inner {
                C3k2Inner::Bottleneck(b) => bottleneck_ls(b),
                C3k2Inner::C3k(c) => c.m.iter().all(bottleneck_ls),
            })
    }
}
