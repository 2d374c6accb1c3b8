use super::{batch_norm, BatchNormParams, Layout, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, Tensor, Var};

/// Weights of the depthwise-separable convolution module. The batch norm is
/// held separately because it is individual per group.
///
/// `channels` is the inner width: the first pointwise layer maps `dim` to
/// `2·channels`, GLU halves it, the depthwise and second pointwise layers
/// work on `channels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvModuleParams {
    pub pointwise_in: ParamId,
    pub pointwise_in_bias: ParamId,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise_out: ParamId,
    pub pointwise_out_bias: ParamId,
    pub kernel: usize,
    pub channels: usize,
}

impl ConvModuleParams {
    pub fn build(b: &mut ParamBuilder<'_>, dim: usize, channels: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel size must be odd, got {kernel}")));
        }
        Ok(ConvModuleParams {
            pointwise_in: b.weight("pointwise_in", [dim, 2 * channels], dim),
            pointwise_in_bias: b.zeros("pointwise_in_bias", [2 * channels]),
            depthwise: b.weight("depthwise", [channels, kernel], kernel),
            depthwise_bias: b.zeros("depthwise_bias", [channels]),
            pointwise_out: b.weight("pointwise_out", [channels, dim], channels),
            pointwise_out_bias: b.zeros("pointwise_out_bias", [dim]),
            kernel,
            channels,
        })
    }

    /// Weights excluding the batch norm.
    pub fn count(dim: usize, channels: usize, kernel: usize) -> usize {
        (dim * 2 * channels + 2 * channels) + (channels * kernel + channels) + (channels * dim + dim)
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.pointwise_in,
            self.pointwise_in_bias,
            self.depthwise,
            self.depthwise_bias,
            self.pointwise_out,
            self.pointwise_out_bias,
        ]
    }
}

/// Pointwise → GLU → depthwise (same padding) → batch norm → Swish → pointwise.
///
/// Padded frames are zeroed before the depthwise convolution so they act
/// exactly like the zero padding beyond the sequence edges.
pub fn conv_module<'t>(
    ctx: &Ctx<'t>,
    z: Var<'t>,
    p: &ConvModuleParams,
    bn: &BatchNormParams,
    layout: &Layout,
) -> Result<Var<'t>> {
    let mask = Tensor::new([layout.rows()], layout.mask().into_iter().map(|m| f64::from(u8::from(m))).collect())?;
    let x = z
        .matmul(&ctx.param(p.pointwise_in))?
        .add_row(&ctx.param(p.pointwise_in_bias))?
        .glu()?
        .scale_rows(&ctx.constant(mask))?;
    let x = x
        .depthwise_conv(&ctx.param(p.depthwise), layout.batch, layout.time)?
        .add_row(&ctx.param(p.depthwise_bias))?;
    batch_norm(ctx, x, bn, layout)?
        .swish()?
        .matmul(&ctx.param(p.pointwise_out))?
        .add_row(&ctx.param(p.pointwise_out_bias))
}
