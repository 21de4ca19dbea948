//! Custom detector blocks: LSConv, EMA attention, C3k2 (dense and LSConv
//! variants) and C2PSA (self-attention and EMA variants).

mod c2psa;
mod c3k2;
mod ema;
mod lsconv;

pub use c2psa::{C2psa, MhsaAttention, PsaAttention, PsaBlock};
pub use c3k2::{Bottleneck, C3k, C3k2, C3k2Inner, ConvKind, Unit};
pub use ema::Ema;
pub use lsconv::LsConv;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub ema_groups: usize,
    pub lsconv_large_kernel: usize,
    pub lsconv_small_kernel: usize,
    /// Channels sharing one dynamically generated small kernel.
    pub lsconv_group_channels: usize,
    pub n_psa_blocks: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { channels: 64, ema_groups: 32, lsconv_large_kernel: 7, lsconv_small_kernel: 3, lsconv_group_channels: 8, n_psa_blocks: 1 }
    }
}

impl BlockConfig {
    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        for (name, k) in [("large", self.lsconv_large_kernel), ("small", self.lsconv_small_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("lsconv {name} kernel {k} must be odd")));
            }
        }
        if self.ema_groups == 0 || self.lsconv_group_channels == 0 {
            return Err(Error::Config("group sizes must be positive".into()));
        }
        Ok(())
    }
}
