use serde::{Deserialize, Serialize};

use crate::blocks::BlockConfig;
use crate::error::{Error, Result};

/// Feature strides of the P3, P4 and P5 heads.
pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub input_size: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub width: f64,
    pub depth: f64,
    pub max_channels: usize,
    /// Use nested C3k blocks in every C3k2 (large model scales) instead of
    /// only in the deep layers.
    pub c3k_everywhere: bool,
    pub block: BlockConfig,
    pub reg_max: usize,
    pub num_classes: usize,
    /// Hidden width of the box branch; `None` uses `max(16, c/4, 4 * reg_max)`.
    pub head_box_channels: Option<usize>,
    /// Hidden width of the class branch; `None` uses `max(c, min(nc, 100))`.
    pub head_cls_channels: Option<usize>,
    /// Build the unmodified topology (no LSConv, self-attention C2PSA, no head EMA).
    pub baseline: bool,
    pub box_gain: f64,
    pub cls_gain: f64,
    pub dfl_gain: f64,
    pub tal_topk: usize,
    pub tal_alpha: f64,
    pub tal_beta: f64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ProposerConfig {
    /// Full "x" scale.
    pub fn paper() -> Self {
        Self {
            input_size: 512,
            conf_threshold: 0.2,
            nms_iou: 0.3,
            max_detections: 300,
            width: 1.5,
            depth: 1.0,
            max_channels: 512,
            c3k_everywhere: true,
            block: BlockConfig { channels: 0, ema_groups: 32, lsconv_large_kernel: 7, lsconv_small_kernel: 3, lsconv_group_channels: 8, n_psa_blocks: 2 },
            reg_max: 16,
            num_classes: 1,
            head_box_channels: None,
            head_cls_channels: None,
            baseline: false,
            box_gain: 7.5,
            cls_gain: 0.5,
            dfl_gain: 1.5,
            tal_topk: 10,
            tal_alpha: 0.5,
            tal_beta: 6.0,
        }
    }

    /// A model small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            width: 0.0625,
            depth: 0.34,
            c3k_everywhere: false,
            block: BlockConfig { channels: 0, ema_groups: 4, lsconv_large_kernel: 7, lsconv_small_kernel: 3, lsconv_group_channels: 4, n_psa_blocks: 1 },
            head_box_channels: Some(16),
            head_cls_channels: Some(16),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return bad(format!("proposer.conf_threshold {} outside (0, 1)", self.conf_threshold));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad(format!("proposer.nms_iou {} outside (0, 1)", self.nms_iou));
        }
        if !(self.width > 0.0 && self.width.is_finite() && self.depth > 0.0 && self.depth.is_finite()) {
            return bad(format!("invalid multipliers width={} depth={}", self.width, self.depth));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("proposer.input_size {} must be a positive multiple of 32", self.input_size));
        }
        if self.reg_max < 2 || self.num_classes == 0 || self.max_channels == 0 {
            return bad("reg_max >= 2, num_classes >= 1 and max_channels >= 1 required".into());
        }
        if self.tal_topk == 0 {
            return bad("proposer.tal_topk must be positive".into());
        }
        Ok(())
    }

    /// Scaled channel count, rounded up to a multiple of 8.
    pub fn channels(&self, c: usize) -> usize {
        let v = c.min(self.max_channels) as f64 * self.width;
        (((v / 8.0).ceil() as usize) * 8).max(8)
    }

    /// Scaled repeat count.
    pub fn repeats(&self, n: usize) -> usize {
        if n > 1 {
            ((n as f64 * self.depth).round() as usize).max(1)
        } else {
            n
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_matches_reference_rules() {
        let x = ProposerConfig::paper();
        assert_eq!(x.channels(64), 96);
        assert_eq!(x.channels(256), 384);
        assert_eq!(x.channels(1024), 768);
        assert_eq!(x.repeats(2), 2);
        let d = ProposerConfig::desk();
        assert_eq!(d.channels(64), 8);
        assert_eq!(d.channels(1024), 32);
        assert_eq!(d.repeats(2), 1);
    }

    #[test]
    fn validation() {
        assert!(ProposerConfig::paper().validate().is_ok());
        assert!(ProposerConfig { width: 0.0, ..ProposerConfig::desk() }.validate().is_err());
        assert!(ProposerConfig { conf_threshold: 1.0, ..ProposerConfig::desk() }.validate().is_err());
        assert!(ProposerConfig { input_size: 500, ..ProposerConfig::desk() }.validate().is_err());
    }
}
