//! The convolutional (inverted-bottleneck) and attention blocks that make up
//! the hybrid network's stages.

use super::norm::{RunningStats, DEFAULT_NORM_EPSILON};
use super::{MapDims, Padding, PoolKind};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Activation;

/// Hidden width multiplier of both block types.
pub const EXPANSION_RATIO: usize = 4;

const BLOCK_ACTIVATION: Activation = Activation::Gelu;

/// Affine parameters of one normalization layer. `running` selects
/// inference behaviour for channel-statistic layers.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub scale: Var,
    pub shift: Var,
    pub running: Option<RunningStats>,
}

#[derive(Clone, Debug)]
pub struct MbConvParams {
    /// `[E, C_in]` with `E = EXPANSION_RATIO · C_in`.
    pub expand: Var,
    pub norm1: NormParams,
    /// `[E, 3, 3]`.
    pub depthwise: Var,
    pub norm2: NormParams,
    /// `[C_out, E]`.
    pub project: Var,
    /// `[C_out, C_in]`; required exactly when the block changes shape.
    pub shortcut: Option<Var>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    /// Halve the spatial extent with 2×2 max pooling before the block.
    pub downsample: bool,
    /// `[C_out, C_in]` projection applied when the channel count changes.
    pub shortcut: Option<Var>,
    pub norm1: NormParams,
    pub norm2: NormParams,
    /// `[E, C]`, `[E]`, `[C, E]`, `[C]` with `E = EXPANSION_RATIO · C`.
    pub ffn_expand: Var,
    pub ffn_expand_bias: Var,
    pub ffn_project: Var,
    pub ffn_project_bias: Var,
}

pub struct BlockOutput {
    pub output: Var,
    /// Batch statistics of each channel-statistic layer run in training mode.
    pub batch_stats: Vec<RunningStats>,
}

fn channel_norm(
    g: &mut Graph,
    x: Var,
    p: &NormParams,
    stats: &mut Vec<RunningStats>,
) -> Result<Var> {
    let (y, batch) = g.channel_norm(x, p.scale, p.shift, DEFAULT_NORM_EPSILON, p.running.as_ref())?;
    stats.extend(batch);
    Ok(y)
}

/// pointwise expand → norm → act → depthwise 3×3 → norm → act → pointwise
/// project, plus the identity or projected shortcut.
pub fn mbconv_block(g: &mut Graph, x: Var, p: &MbConvParams) -> Result<BlockOutput> {
    let dims = MapDims::of(g.shape(x))?;
    let c_out = g.shape(p.project)[0];
    let same_shape = p.stride == 1 && c_out == dims.channels;
    if same_shape == p.shortcut.is_some() {
        return Err(Error::Shape(format!(
            "mbconv {}→{c_out} stride {}: shortcut projection {}",
            dims.channels,
            p.stride,
            if same_shape { "not allowed" } else { "required" }
        )));
    }
    let mut stats = Vec::new();
    let h = g.pointwise_conv(x, p.expand, None, 1)?;
    let h = channel_norm(g, h, &p.norm1, &mut stats)?;
    let h = g.activation(h, BLOCK_ACTIVATION)?;
    let h = g.depthwise_conv2d(h, p.depthwise, Padding::Same, p.stride)?;
    let h = channel_norm(g, h, &p.norm2, &mut stats)?;
    let h = g.activation(h, BLOCK_ACTIVATION)?;
    let h = g.pointwise_conv(h, p.project, None, 1)?;
    let residual = match p.shortcut {
        Some(w) => g.pointwise_conv(x, w, None, p.stride)?,
        None => x,
    };
    let output = g.add(residual, h)?;
    Ok(BlockOutput {
        output,
        batch_stats: stats,
    })
}

/// layer-norm → global self-attention → residual → layer-norm → feed-forward
/// → residual, after optional downsampling and channel projection.
pub fn transformer_block(g: &mut Graph, x: Var, p: &TransformerParams) -> Result<BlockOutput> {
    let mut x = x;
    if p.downsample {
        x = g.pool2d(x, PoolKind::Max, 2, 2)?;
    }
    if let Some(w) = p.shortcut {
        x = g.pointwise_conv(x, w, None, 1)?;
    }
    let h = g.layer_norm(x, p.norm1.scale, p.norm1.shift, DEFAULT_NORM_EPSILON)?;
    let h = g.global_self_attention(h)?;
    let x = g.add(x, h)?;
    let h = g.layer_norm(x, p.norm2.scale, p.norm2.shift, DEFAULT_NORM_EPSILON)?;
    let h = g.pointwise_conv(h, p.ffn_expand, Some(p.ffn_expand_bias), 1)?;
    let h = g.activation(h, BLOCK_ACTIVATION)?;
    let h = g.pointwise_conv(h, p.ffn_project, Some(p.ffn_project_bias), 1)?;
    let output = g.add(x, h)?;
    Ok(BlockOutput {
        output,
        batch_stats: Vec::new(),
    })
}
