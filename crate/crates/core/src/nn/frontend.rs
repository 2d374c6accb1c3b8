use super::{Layout, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, Tensor, Var};

/// Two 3×3 stride-2 convolutions over (time, frequency) followed by a linear
/// projection of each subsampled frame to the model dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrontendParams {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub feature_dim: usize,
    pub channels: usize,
    pub dim: usize,
}

const KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Output length of one 3×3 stride-2 valid convolution.
fn conv_len(n: usize) -> Option<usize> {
    (n >= KERNEL).then(|| (n - KERNEL) / STRIDE + 1)
}

/// Frames left after the frontend: `⌊(⌊(n−1)/2⌋ − 1)/2⌋`, or `None` when
/// fewer than 7 frames are given (nothing survives both convolutions).
pub fn subsampled_len(n: usize) -> Option<usize> {
    conv_len(n).and_then(conv_len)
}

impl FrontendParams {
    pub fn build(b: &mut ParamBuilder<'_>, feature_dim: usize, channels: usize, dim: usize) -> Result<Self> {
        let freq = subsampled_len(feature_dim).ok_or_else(|| {
            Error::Config(format!("feature dim {feature_dim} is too small for two stride-2 convolutions"))
        })?;
        Ok(FrontendParams {
            conv1_weight: b.weight("conv1_weight", [channels, 1, KERNEL, KERNEL], KERNEL * KERNEL),
            conv1_bias: b.zeros("conv1_bias", [channels]),
            conv2_weight: b.weight("conv2_weight", [channels, channels, KERNEL, KERNEL], channels * KERNEL * KERNEL),
            conv2_bias: b.zeros("conv2_bias", [channels]),
            proj_weight: b.weight("proj_weight", [channels * freq, dim], channels * freq),
            proj_bias: b.zeros("proj_bias", [dim]),
            feature_dim,
            channels,
            dim,
        })
    }

    pub fn count(feature_dim: usize, channels: usize, dim: usize) -> usize {
        let freq = subsampled_len(feature_dim).unwrap_or(0);
        (channels * KERNEL * KERNEL + channels)
            + (channels * channels * KERNEL * KERNEL + channels)
            + (channels * freq * dim + dim)
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.conv1_weight, self.conv1_bias, self.conv2_weight, self.conv2_bias, self.proj_weight, self.proj_bias]
    }
}

/// `[T × F]` features to `[T' × dim]`, with Swish after each convolution.
pub fn subsample_frontend<'t>(ctx: &Ctx<'t>, features: &Tensor, p: &FrontendParams) -> Result<Var<'t>> {
    let (frames, feat) = match features.shape() {
        [t, f] => (*t, *f),
        s => return Err(Error::Shape(format!("frontend expects [T x F] features, got {s:?}"))),
    };
    if feat != p.feature_dim {
        return Err(Error::Shape(format!("frontend expects {} features per frame, got {feat}", p.feature_dim)));
    }
    let out_len = subsampled_len(frames).ok_or_else(|| {
        Error::Argument(format!("input of {frames} frames is too short for the subsampling frontend (need >= 7)"))
    })?;
    let x = ctx.constant(features.clone().reshape([1, frames, feat])?);
    let x = x.conv2d(&ctx.param(p.conv1_weight), &ctx.param(p.conv1_bias), STRIDE)?.swish()?;
    let x = x.conv2d(&ctx.param(p.conv2_weight), &ctx.param(p.conv2_bias), STRIDE)?.swish()?;
    let shape = x.shape();
    let (c, t, f) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(t, out_len);
    // [C, T', F'] -> [T', C·F']
    let idx = (0..t).flat_map(|ti| (0..c).flat_map(move |ci| (0..f).map(move |fi| (ci * t + ti) * f + fi))).collect();
    x.gather(idx, [t, c * f])?
        .matmul(&ctx.param(p.proj_weight))?
        .add_row(&ctx.param(p.proj_bias))
}

/// Runs the frontend on each utterance and stacks the results, zero-padded
/// to the longest output.
pub fn subsample_frontend_batch<'t>(
    ctx: &Ctx<'t>,
    features: &[Tensor],
    p: &FrontendParams,
) -> Result<(Var<'t>, Layout)> {
    let outs = features.iter().map(|f| subsample_frontend(ctx, f, p)).collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = outs.iter().map(|o| o.shape()[0]).collect();
    let time = lengths.iter().copied().max().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let mut parts = Vec::with_capacity(2 * outs.len());
    for (o, &len) in outs.into_iter().zip(&lengths) {
        parts.push(o);
        if len < time {
            parts.push(ctx.constant(Tensor::zeros([time - len, p.dim])));
        }
    }
    Ok((Var::concat_rows(&parts)?, Layout::new(time, lengths)))
}
