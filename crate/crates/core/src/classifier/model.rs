//! ConvNeXt backbone with a two-class head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{IMAGENET_MEAN, IMAGENET_STD};
use crate::nn::graph::{ConvSpec, Graph, Var};
use crate::nn::layers::ChannelNorm;
use crate::nn::params::{ParamBuilder, ParamId};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Side of the square candidate crops.
    pub input_size: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub layer_scale_init: f64,
    /// Context added around each proposal box before resizing, as a fraction
    /// of the box side on every edge.
    pub crop_margin: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Candidates scoring below this are rejected.
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ClassifierConfig {
    /// ConvNeXt-Tiny.
    pub fn paper() -> Self {
        Self {
            input_size: 64,
            dims: vec![96, 192, 384, 768],
            depths: vec![3, 3, 9, 3],
            layer_scale_init: 1e-6,
            crop_margin: 0.0,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            threshold: 0.5,
        }
    }

    pub fn desk() -> Self {
        Self { dims: vec![16, 32, 64, 128], depths: vec![1, 1, 2, 1], layer_scale_init: 0.1, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.dims.len();
        if stages == 0 || stages != self.depths.len() || self.dims.contains(&0) {
            return Err(Error::Config(format!("classifier dims {:?} / depths {:?}", self.dims, self.depths)));
        }
        let reduction = 4usize << (stages - 1);
        if self.input_size == 0 || self.input_size % reduction != 0 {
            return Err(Error::Config(format!("classifier input {} not divisible by {reduction}", self.input_size)));
        }
        if !(0.0..=1.0).contains(&self.threshold) || !(self.crop_margin >= 0.0) || self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("classifier threshold, margin or std out of range".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
    spec: ConvSpec,
}

impl Dense {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize) -> Result<Self> {
        let weight = pb.weight("weight", &[c_out, c_in / groups, k, k])?;
        let fan_in = (c_in / groups * k * k) as f64;
        let bias = pb.uniform("bias", &[c_out], 1.0 / fan_in.sqrt())?;
        let pad = if stride == 1 { k / 2 } else { 0 };
        Ok(Self { weight, bias, spec: ConvSpec::new(stride, pad, groups) })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), self.spec)
    }
}

/// Depthwise 7x7, layer norm, 4x pointwise expansion with GELU, projection,
/// layer scale and residual.
#[derive(Clone, Debug)]
struct Block {
    dw: Dense,
    norm: ChannelNorm,
    pw1: Dense,
    pw2: Dense,
    gamma: ParamId,
}

impl Block {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize, layer_scale: f64) -> Result<Self> {
        Ok(Self {
            dw: Dense::new(&mut pb.sub("dw"), c, c, 7, 1, c)?,
            norm: ChannelNorm::new(&mut pb.sub("norm"), c)?,
            pw1: Dense::new(&mut pb.sub("pw1"), c, 4 * c, 1, 1, 1)?,
            pw2: Dense::new(&mut pb.sub("pw2"), 4 * c, c, 1, 1, 1)?,
            gamma: pb.full("gamma", &[1, c, 1, 1], layer_scale)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.dw.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        let y = self.pw1.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.pw2.forward(g, y)?;
        let gamma = g.param(self.gamma);
        let y = g.mul(y, gamma)?;
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    /// Layer norm and 2x2 stride-2 convolution; the first stage uses the stem.
    down: (ChannelNorm, Dense),
    blocks: Vec<Block>,
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    /// `(B, 2)` class logits, background first.
    pub logits: Var,
    /// `(B, D)` pooled, normalized penultimate features.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct ConvNext {
    pub config: ClassifierConfig,
    stem: Dense,
    stem_norm: ChannelNorm,
    stages: Vec<Stage>,
    head_norm: ChannelNorm,
    head: Dense,
}

impl ConvNext {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.dims;
        let stem = Dense::new(&mut pb.sub("stem"), 3, d[0], 4, 4, 1)?;
        let stem_norm = ChannelNorm::new(&mut pb.sub("stem_norm"), d[0])?;
        let mut stages = Vec::with_capacity(d.len());
        for (s, (&c, &depth)) in d.iter().zip(&config.depths).enumerate() {
            let mut sp = pb.sub(format!("stage{s}"));
            let c_prev = if s == 0 { c } else { d[s - 1] };
            let down = (ChannelNorm::new(&mut sp.sub("down_norm"), c_prev)?, Dense::new(&mut sp.sub("down"), c_prev, c, 2, 2, 1)?);
            let blocks = (0..depth).map(|i| Block::new(&mut sp.sub(i), c, config.layer_scale_init)).collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
        }
        let c = config.feature_dim();
        let head_norm = ChannelNorm::new(&mut pb.sub("head_norm"), c)?;
        let head = Dense::new(&mut pb.sub("head"), c, 2, 1, 1, 1)?;
        Ok(Self { config: config.clone(), stem, stem_norm, stages, head_norm, head })
    }

    /// `x` is `(B, 3, S, S)` after mean/std normalization.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<ClassifierOutput> {
        let s = self.config.input_size;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!("classifier expects (B, 3, {s}, {s}), got {shape:?}")));
        }
        let b = shape[0];
        let mut y = self.stem.forward(g, x)?;
        y = self.stem_norm.forward(g, y)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                y = stage.down.0.forward(g, y)?;
                y = stage.down.1.forward(g, y)?;
            }
            for block in &stage.blocks {
                y = block.forward(g, y)?;
            }
        }
        let pooled = g.mean(y, &[2, 3])?;
        let feat = self.head_norm.forward(g, pooled)?;
        let logits = self.head.forward(g, feat)?;
        let d = self.config.feature_dim();
        Ok(ClassifierOutput { logits: g.reshape(logits, &[b, 2])?, features: g.reshape(feat, &[b, d])? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, GradCheckOptions};
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ClassifierConfig {
        ClassifierConfig { input_size: 16, dims: vec![4, 8], depths: vec![1, 1], ..ClassifierConfig::desk() }
    }

    #[test]
    fn output_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ClassifierConfig::desk();
        let m = ConvNext::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::full(&[3, 3, 64, 64], 0.1));
        let out = m.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out.logits), &[3, 2]);
        assert_eq!(g.shape(out.features), &[3, 128]);
        let bad = g.input(Tensor::full(&[1, 3, 32, 32], 0.1));
        assert!(m.forward(&mut g, bad).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ClassifierConfig::paper().validate().is_ok());
        assert!(ClassifierConfig { input_size: 48, ..ClassifierConfig::paper() }.validate().is_err());
        assert!(ClassifierConfig { depths: vec![1], ..ClassifierConfig::desk() }.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ConvNext::new(&mut ParamBuilder::new(&mut store, &mut rng), &tiny()).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let report = check_gradients(&store, &x, GradCheckOptions::default(), |g, x| {
            let out = m.forward(g, x)?;
            let f = g.reshape(out.features, &[2, 8, 1, 1])?;
            let l = g.reshape(out.logits, &[2, 2, 1, 1])?;
            g.concat(&[f, l], 1)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
