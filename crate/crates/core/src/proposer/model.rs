use serde::{Deserialize, Serialize};

use crate::blocks::{C2psa, C3k2, ConvKind, Ema};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvNormAct};
use crate::nn::{ConvSpec, Graph, ParamBuilder, Var};
use crate::tensor::Scalar;

use super::config::{ProposerConfig, STRIDES};

/// Spatial pyramid pooling with three chained 5x5 max pools.
#[derive(Clone, Debug)]
pub struct Sppf {
    cv1: ConvNormAct,
    cv2: ConvNormAct,
}

impl Sppf {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c1: usize, c2: usize) -> Result<Self> {
        let c_ = c1 / 2;
        Ok(Self { cv1: ConvNormAct::new(&mut pb.sub("cv1"), c1, c_, 1, 1)?, cv2: ConvNormAct::new(&mut pb.sub("cv2"), 4 * c_, c2, 1, 1)? })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut ys = vec![self.cv1.forward(g, x)?];
        for _ in 0..3 {
            let last = *ys.last().expect("non-empty");
            ys.push(g.max_pool2d(last, 5, 1, 2)?);
        }
        let cat = g.concat(&ys, 1)?;
        self.cv2.forward(g, cat)
    }
}

/// One detection level: optional EMA on the input, then separate box
/// (distribution logits) and class branches.
#[derive(Clone, Debug)]
pub struct HeadLevel {
    pub stride: usize,
    pub ema: Option<Ema>,
    box1: ConvNormAct,
    box2: ConvNormAct,
    box_out: Conv2d,
    cls_dw1: ConvNormAct,
    cls_pw1: ConvNormAct,
    cls_dw2: ConvNormAct,
    cls_pw2: ConvNormAct,
    cls_out: Conv2d,
}

fn conv_with_bias<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, bias: f64) -> Result<Conv2d> {
    Ok(Conv2d {
        weight: pb.weight("weight", &[c_out, c_in, 1, 1])?,
        bias: Some(pb.full("bias", &[c_out], bias)?),
        spec: ConvSpec::new(1, 0, 1),
        c_in,
        c_out,
        k: 1,
    })
}

impl HeadLevel {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ProposerConfig, c: usize, c_box: usize, c_cls: usize, stride: usize) -> Result<Self> {
        let ema = if cfg.baseline { None } else { Some(Ema::new(&mut pb.sub("ema"), &cfg.block.with_channels(c))?) };
        let nc = cfg.num_classes;
        // Prior of roughly five objects per image spread over the level's cells.
        let cells = (cfg.input_size as f64 / stride as f64).powi(2);
        let cls_bias = (5.0 / nc as f64 / cells).ln();
        Ok(Self {
            stride,
            ema,
            box1: ConvNormAct::new(&mut pb.sub("box1"), c, c_box, 3, 1)?,
            box2: ConvNormAct::new(&mut pb.sub("box2"), c_box, c_box, 3, 1)?,
            box_out: conv_with_bias(&mut pb.sub("box_out"), c_box, 4 * cfg.reg_max, 1.0)?,
            cls_dw1: ConvNormAct::with_groups(&mut pb.sub("cls_dw1"), c, c, 3, 1, c, true)?,
            cls_pw1: ConvNormAct::new(&mut pb.sub("cls_pw1"), c, c_cls, 1, 1)?,
            cls_dw2: ConvNormAct::with_groups(&mut pb.sub("cls_dw2"), c_cls, c_cls, 3, 1, c_cls, true)?,
            cls_pw2: ConvNormAct::new(&mut pb.sub("cls_pw2"), c_cls, c_cls, 1, 1)?,
            cls_out: conv_with_bias(&mut pb.sub("cls_out"), c_cls, nc, cls_bias)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let x = match &self.ema {
            Some(e) => e.forward(g, x)?,
            None => x,
        };
        let b = self.box1.forward(g, x)?;
        let b = self.box2.forward(g, b)?;
        let b = self.box_out.forward(g, b)?;
        let c = self.cls_dw1.forward(g, x)?;
        let c = self.cls_pw1.forward(g, c)?;
        let c = self.cls_dw2.forward(g, c)?;
        let c = self.cls_pw2.forward(g, c)?;
        let c = self.cls_out.forward(g, c)?;
        Ok((b, c))
    }
}

/// Raw head outputs of one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub stride: usize,
    /// `(B, 4 * reg_max, H, W)` distribution logits for left, top, right, bottom.
    pub box_logits: Var,
    /// `(B, num_classes, H, W)`.
    pub cls_logits: Var,
}

/// One row of the structural audit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub layer: String,
    pub kind: String,
    pub level: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    /// Levels whose output C3k2 block uses LSConv.
    pub c3k2_lsconv: Vec<String>,
    pub c2psa_ema: usize,
    pub head_ema: usize,
}

impl AuditSummary {
    /// True when all three modifications are present.
    pub fn is_improved(&self) -> bool {
        self.c3k2_lsconv == ["P3", "P4", "P5"] && self.c2psa_ema == 1 && self.head_ema == 3
    }

    /// True when none of the modifications is present.
    pub fn is_baseline(&self) -> bool {
        self.c3k2_lsconv.is_empty() && self.c2psa_ema == 0 && self.head_ema == 0
    }
}

/// Backbone, feature-pyramid neck and three-level anchor-free head.
#[derive(Clone, Debug)]
pub struct ProposerModel {
    pub config: ProposerConfig,
    stem0: ConvNormAct,
    stem1: ConvNormAct,
    b2: C3k2,
    b3: ConvNormAct,
    b4: C3k2,
    b5: ConvNormAct,
    b6: C3k2,
    b7: ConvNormAct,
    b8: C3k2,
    sppf: Sppf,
    psa: C2psa,
    n13: C3k2,
    n16: C3k2,
    n17: ConvNormAct,
    n19: C3k2,
    n20: ConvNormAct,
    n22: C3k2,
    pub heads: Vec<HeadLevel>,
}

impl ProposerModel {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ProposerConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = |c| cfg.channels(c);
        let n2 = cfg.repeats(2);
        let blk = &cfg.block;
        let dense = ConvKind::Dense(3);
        let p_kind = if cfg.baseline { dense } else { ConvKind::LsConv };
        let c3k = |deep: bool| cfg.c3k_everywhere || deep;
        let c2psa_cfg = blk.with_channels(ch(1024));

        let (c1, c2, c3, c4, c5) = (ch(64), ch(128), ch(256), ch(512), ch(1024));
        let model = Self {
            config: cfg.clone(),
            stem0: ConvNormAct::new(&mut pb.sub("l0"), 3, c1, 3, 2)?,
            stem1: ConvNormAct::new(&mut pb.sub("l1"), c1, c2, 3, 2)?,
            b2: C3k2::new(&mut pb.sub("l2"), c2, c3, n2, c3k(false), 0.25, true, dense, blk)?,
            b3: ConvNormAct::new(&mut pb.sub("l3"), c3, c3, 3, 2)?,
            b4: C3k2::new(&mut pb.sub("l4"), c3, c4, n2, c3k(false), 0.25, true, dense, blk)?,
            b5: ConvNormAct::new(&mut pb.sub("l5"), c4, c4, 3, 2)?,
            b6: C3k2::new(&mut pb.sub("l6"), c4, c4, n2, c3k(true), 0.5, true, dense, blk)?,
            b7: ConvNormAct::new(&mut pb.sub("l7"), c4, c5, 3, 2)?,
            b8: C3k2::new(&mut pb.sub("l8"), c5, c5, n2, c3k(true), 0.5, true, dense, blk)?,
            sppf: Sppf::new(&mut pb.sub("l9"), c5, c5)?,
            psa: C2psa::new(&mut pb.sub("l10"), &c2psa_cfg, !cfg.baseline)?,
            n13: C3k2::new(&mut pb.sub("l13"), c5 + c4, c4, n2, c3k(false), 0.5, true, dense, blk)?,
            n16: C3k2::new(&mut pb.sub("l16"), c4 + c4, c3, n2, c3k(false), 0.5, true, p_kind, blk)?,
            n17: ConvNormAct::new(&mut pb.sub("l17"), c3, c3, 3, 2)?,
            n19: C3k2::new(&mut pb.sub("l19"), c3 + c4, c4, n2, c3k(false), 0.5, true, p_kind, blk)?,
            n20: ConvNormAct::new(&mut pb.sub("l20"), c4, c4, 3, 2)?,
            n22: C3k2::new(&mut pb.sub("l22"), c4 + c5, c5, n2, c3k(true), 0.5, true, p_kind, blk)?,
            heads: Vec::new(),
        };
        let level_ch = [c3, c4, c5];
        let c_box = cfg.head_box_channels.unwrap_or_else(|| 16.max(c3 / 4).max(4 * cfg.reg_max));
        let c_cls = cfg.head_cls_channels.unwrap_or_else(|| c3.max(cfg.num_classes.min(100)));
        let mut heads = Vec::with_capacity(3);
        for (i, (&c, &s)) in level_ch.iter().zip(&STRIDES).enumerate() {
            heads.push(HeadLevel::new(&mut pb.sub(format!("head.p{}", i + 3)), cfg, c, c_box, c_cls, s)?);
        }
        Ok(Self { heads, ..model })
    }

    /// Runs the network on a `(B, 3, S, S)` batch with `S` a multiple of 32.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<LevelOutput>> {
        match g.shape(x) {
            [_, 3, h, w] if h % 32 == 0 && w % 32 == 0 && *h > 0 && *w > 0 => {}
            s => return Err(Error::Shape(format!("proposer expects (B, 3, H, W) with H, W multiples of 32, got {s:?}"))),
        }
        let x = self.stem0.forward(g, x)?;
        let x = self.stem1.forward(g, x)?;
        let x = self.b2.forward(g, x)?;
        let x = self.b3.forward(g, x)?;
        let p3 = self.b4.forward(g, x)?;
        let x = self.b5.forward(g, p3)?;
        let p4 = self.b6.forward(g, x)?;
        let x = self.b7.forward(g, p4)?;
        let x = self.b8.forward(g, x)?;
        let x = self.sppf.forward(g, x)?;
        let p5 = self.psa.forward(g, x)?;

        let up = g.upsample2x(p5)?;
        let cat = g.concat(&[up, p4], 1)?;
        let h13 = self.n13.forward(g, cat)?;
        let up = g.upsample2x(h13)?;
        let cat = g.concat(&[up, p3], 1)?;
        let out3 = self.n16.forward(g, cat)?;
        let down = self.n17.forward(g, out3)?;
        let cat = g.concat(&[down, h13], 1)?;
        let out4 = self.n19.forward(g, cat)?;
        let down = self.n20.forward(g, out4)?;
        let cat = g.concat(&[down, p5], 1)?;
        let out5 = self.n22.forward(g, cat)?;

        let mut outs = Vec::with_capacity(3);
        for (head, feat) in self.heads.iter().zip([out3, out4, out5]) {
            let (box_logits, cls_logits) = head.forward(g, feat)?;
            outs.push(LevelOutput { stride: head.stride, box_logits, cls_logits });
        }
        Ok(outs)
    }

    /// Walks the assembled graph and reports the kind of every C3k2, C2PSA and
    /// head block.
    pub fn audit(&self) -> Vec<AuditEntry> {
        let c3k2 = |layer: &str, b: &C3k2, level: Option<&str>| AuditEntry {
            layer: layer.into(),
            kind: if b.uses_lsconv() { "C3k2_LSConv".into() } else { "C3k2".into() },
            level: level.map(Into::into),
        };
        let mut rows = vec![
            c3k2("l2", &self.b2, None),
            c3k2("l4", &self.b4, None),
            c3k2("l6", &self.b6, None),
            c3k2("l8", &self.b8, None),
            AuditEntry { layer: "l10".into(), kind: if self.psa.use_ema { "C2PSA_EMA".into() } else { "C2PSA".into() }, level: None },
            c3k2("l13", &self.n13, None),
            c3k2("l16", &self.n16, Some("P3")),
            c3k2("l19", &self.n19, Some("P4")),
            c3k2("l22", &self.n22, Some("P5")),
        ];
        for (i, h) in self.heads.iter().enumerate() {
            rows.push(AuditEntry {
                layer: format!("head.p{}", i + 3),
                kind: if h.ema.is_some() { "Detect+EMA".into() } else { "Detect".into() },
                level: Some(format!("P{}", i + 3)),
            });
        }
        rows
    }

    pub fn audit_summary(&self) -> AuditSummary {
        let rows = self.audit();
        AuditSummary {
            c3k2_lsconv: rows.iter().filter(|r| r.kind == "C3k2_LSConv").filter_map(|r| r.level.clone()).collect(),
            c2psa_ema: rows.iter().filter(|r| r.kind == "C2PSA_EMA").count(),
            head_ema: rows.iter().filter(|r| r.kind == "Detect+EMA").count(),
        }
    }
}
