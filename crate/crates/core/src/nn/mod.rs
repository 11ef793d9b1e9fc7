//! Feature-map layers: depthwise/dense/pointwise convolution, projection-free
//! global self-attention, normalization, pooling, and the two hybrid blocks
//! built from them.
//!
//! Every layer accepts a single map `[C, H, W]` or a batch `[B, C, H, W]`
//! and returns the same rank it was given.

mod attention;
mod blocks;
mod conv;
mod linear;
mod norm;
mod pool;

pub use attention::{attention_matrix, global_self_attention, AttentionContext};
pub use blocks::{
    mbconv_block, transformer_block, BlockOutput, MbConvParams, NormParams, TransformerParams,
    EXPANSION_RATIO,
};
pub use conv::{conv2d, depthwise_conv2d, pointwise_conv, DepthwiseKernel, Padding};
pub use linear::linear;
pub use norm::{normalize, NormKind, RunningStats, DEFAULT_NORM_EPSILON};
pub use pool::{pool2d, PoolKind};

use crate::error::{Error, Result};

/// Batch/channel/spatial extents of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct MapDims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    batched: bool,
}

impl MapDims {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [c, h, w] => Ok(MapDims {
                batch: 1,
                channels: c,
                height: h,
                width: w,
                batched: false,
            }),
            [b, c, h, w] => Ok(MapDims {
                batch: b,
                channels: c,
                height: h,
                width: w,
                batched: true,
            }),
            _ => Err(Error::Rank(format!(
                "feature map must be [C,H,W] or [B,C,H,W], got {shape:?}"
            ))),
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Shape of a map with these batch semantics and new extents.
    pub fn shape_with(&self, channels: usize, height: usize, width: usize) -> Vec<usize> {
        if self.batched {
            vec![self.batch, channels, height, width]
        } else {
            vec![channels, height, width]
        }
    }
}
