use super::ParamBuilder;
use crate::error::Result;
use crate::tensor::{Ctx, ParamId, Var};

/// Two-layer position-wise feed-forward network with Swish.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn build(b: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Self {
        FfnParams {
            w1: b.weight("w1", [dim, hidden], dim),
            b1: b.zeros("b1", [hidden]),
            w2: b.weight("w2", [hidden, dim], hidden),
            b2: b.zeros("b2", [dim]),
        }
    }

    pub fn count(dim: usize, hidden: usize) -> usize {
        2 * dim * hidden + hidden + dim
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// `swish(z·W1 + b1)·W2 + b2`, row by row.
pub fn ffn_forward<'t>(ctx: &Ctx<'t>, z: Var<'t>, p: &FfnParams) -> Result<Var<'t>> {
    z.matmul(&ctx.param(p.w1))?
        .add_row(&ctx.param(p.b1))?
        .swish()?
        .matmul(&ctx.param(p.w2))?
        .add_row(&ctx.param(p.b2))
}
