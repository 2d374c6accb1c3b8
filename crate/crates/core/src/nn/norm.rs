use super::{Layout, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight kept by the running statistics at every train-mode update.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

/// Scale and offset of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl NormParams {
    pub fn build(b: &mut ParamBuilder<'_>, dim: usize) -> Self {
        NormParams { gamma: b.ones("gamma", [dim]), beta: b.zeros("beta", [dim]), eps: LAYER_NORM_EPS }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

pub fn layer_norm<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &NormParams) -> Result<Var<'t>> {
    x.normalize_rows(p.eps)?.mul_row(&ctx.param(p.gamma))?.add_row(&ctx.param(p.beta))
}

/// Batch norm with running statistics kept as store buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn build(b: &mut ParamBuilder<'_>, channels: usize) -> Self {
        BatchNormParams {
            gamma: b.ones("gamma", [channels]),
            beta: b.zeros("beta", [channels]),
            running_mean: b.buffer("running_mean", Tensor::zeros([channels])),
            running_var: b.buffer("running_var", Tensor::filled([channels], 1.0)),
            eps: BATCH_NORM_EPS,
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    /// Trainable entries only.
    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Per-channel normalization of a `[batch·time × channels]` matrix.
///
/// Train mode uses the statistics of the valid frames only and records an
/// exponential-moving-average update of the running statistics on `ctx`.
/// Eval mode uses the running statistics.
pub fn batch_norm<'t>(ctx: &Ctx<'t>, x: Var<'t>, p: &BatchNormParams, layout: &Layout) -> Result<Var<'t>> {
    let normalized = if ctx.is_train() {
        let (y, mean, var) = x.normalize_cols(&layout.mask(), p.eps)?;
        let mut rm = ctx.buffer(p.running_mean);
        let mut rv = ctx.buffer(p.running_var);
        for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
            *r = p.momentum * *r + (1.0 - p.momentum) * m;
        }
        for (r, v) in rv.data_mut().iter_mut().zip(&var) {
            *r = p.momentum * *r + (1.0 - p.momentum) * v;
        }
        ctx.record_update(p.running_mean, rm);
        ctx.record_update(p.running_var, rv);
        y
    } else {
        let rm = ctx.buffer(p.running_mean);
        let rv = ctx.buffer(p.running_var);
        if rv.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Usage("batch norm running variance is negative".into()));
        }
        let shift = ctx.constant(rm.map(|m| -m));
        let inv_std = ctx.constant(rv.map(|v| 1.0 / (v + p.eps).sqrt()));
        x.add_row(&shift)?.mul_row(&inv_std)?
    };
    normalized.mul_row(&ctx.param(p.gamma))?.add_row(&ctx.param(p.beta))
}
