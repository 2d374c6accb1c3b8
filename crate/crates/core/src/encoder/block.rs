use super::EncoderConfig;
use crate::error::Result;
use crate::moe::{moe_ffn_forward, ExpertBank, RouterParams, RouterRecord};
use crate::nn::{
    conv_module, ffn_forward, layer_norm, rel_mhsa, BatchNormParams, ConvModuleParams, FfnParams, Layout,
    MhsaParams, NormParams, ParamBuilder,
};
use crate::tensor::{Ctx, ParamId, Var};

/// Trace labels of the four residual branches, in execution order.
pub const BRANCH_LABELS: [&str; 4] = ["ffn1", "mhsa", "conv", "moe_ffn"];
const PLAIN_LABELS: [&str; 4] = ["ffn1", "mhsa", "conv", "ffn2"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SecondFfn {
    Plain(FfnParams),
    Moe(ExpertBank),
}

/// Weights of block position `c`, reused by every group.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedBlock {
    pub ffn1: FfnParams,
    pub mhsa: MhsaParams,
    pub conv: ConvModuleParams,
    pub ffn2: SecondFfn,
}

impl SharedBlock {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &EncoderConfig) -> Result<Self> {
        let ffn1 = FfnParams::build(&mut b.scope("ffn1"), cfg.dim, cfg.ffn_dim);
        let mhsa = MhsaParams::build(&mut b.scope("mhsa"), cfg.dim, cfg.heads, true)?;
        let conv = ConvModuleParams::build(&mut b.scope("conv"), cfg.dim, cfg.conv_channels(), cfg.kernel)?;
        let ffn2 = if cfg.is_moe() {
            SecondFfn::Moe(ExpertBank::build(&mut b.scope("experts"), cfg.dim, cfg.ffn_dim, cfg.experts))
        } else {
            SecondFfn::Plain(FfnParams::build(&mut b.scope("ffn2"), cfg.dim, cfg.ffn_dim))
        };
        Ok(SharedBlock { ffn1, mhsa, conv, ffn2 })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.ffn1.ids().to_vec();
        ids.extend(self.mhsa.ids());
        ids.extend(self.conv.ids());
        match &self.ffn2 {
            SecondFfn::Plain(f) => ids.extend(f.ids()),
            SecondFfn::Moe(bank) => ids.extend(bank.ids()),
        }
        ids
    }
}

/// Norms and router of block `(g, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAdapters {
    pub norm_ffn1: NormParams,
    pub norm_mhsa: NormParams,
    pub norm_conv: NormParams,
    pub norm_ffn2: NormParams,
    pub norm_out: NormParams,
    pub conv_bn: BatchNormParams,
    pub router: Option<RouterParams>,
}

impl BlockAdapters {
    /// `b` is the encoder-level builder. `first` holds group 0's adapters of
    /// the same position; its norms or router are reused when shared.
    pub(super) fn build(
        b: &mut ParamBuilder<'_>,
        cfg: &EncoderConfig,
        g: usize,
        c: usize,
        first: Option<&BlockAdapters>,
    ) -> Result<Self> {
        let scope_for = |shared: bool| if shared { format!("blocks.{c}") } else { format!("groups.{g}.blocks.{c}") };
        let norms = match first {
            Some(f) if cfg.share_norms => (
                f.norm_ffn1.clone(),
                f.norm_mhsa.clone(),
                f.norm_conv.clone(),
                f.norm_ffn2.clone(),
                f.norm_out.clone(),
                f.conv_bn.clone(),
            ),
            _ => {
                let mut s = b.scope(scope_for(cfg.share_norms));
                (
                    NormParams::build(&mut s.scope("norm_ffn1"), cfg.dim),
                    NormParams::build(&mut s.scope("norm_mhsa"), cfg.dim),
                    NormParams::build(&mut s.scope("norm_conv"), cfg.dim),
                    NormParams::build(&mut s.scope("norm_ffn2"), cfg.dim),
                    NormParams::build(&mut s.scope("norm_out"), cfg.dim),
                    BatchNormParams::build(&mut s.scope("conv_bn"), cfg.conv_channels()),
                )
            }
        };
        let router = match first {
            _ if !cfg.is_moe() => None,
            Some(f) if cfg.share_routers => f.router.clone(),
            _ => Some(RouterParams::build(
                &mut b.scope(scope_for(cfg.share_routers)).scope("router"),
                cfg.dim,
                cfg.experts,
                cfg.noise_std,
            )?),
        };
        let (norm_ffn1, norm_mhsa, norm_conv, norm_ffn2, norm_out, conv_bn) = norms;
        Ok(BlockAdapters { norm_ffn1, norm_mhsa, norm_conv, norm_ffn2, norm_out, conv_bn, router })
    }

    /// Norm entries including the batch-norm running statistics.
    pub fn norm_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for n in [&self.norm_ffn1, &self.norm_mhsa, &self.norm_conv, &self.norm_ffn2, &self.norm_out] {
            ids.extend(n.ids());
        }
        let bn = &self.conv_bn;
        ids.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var]);
        ids
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm_ids();
        ids.extend(self.router.as_ref().map(|r| r.weight));
        ids
    }
}

pub struct BlockOutput<'t> {
    pub out: Var<'t>,
    pub record: Option<RouterRecord<'t>>,
    /// What each residual branch added to the stream, in execution order.
    pub branches: [Var<'t>; 4],
    pub labels: [&'static str; 4],
}

/// One MoE-conformer block with pre-norm inside every branch:
///
/// ```text
/// z1 = z  + ½·FFN(LN(z))
/// z2 = z1 + MHSA(LN(z1))
/// z3 = z2 + Conv(LN(z2))
/// ẑ  = LN(z3 + ½·FFN_moe(LN(z3)))
/// ```
pub fn conformer_block_forward<'t>(
    ctx: &Ctx<'t>,
    z: Var<'t>,
    shared: &SharedBlock,
    a: &BlockAdapters,
    cfg: &EncoderConfig,
    layout: &Layout,
) -> Result<BlockOutput<'t>> {
    let rate = cfg.dropout;
    let b1 = ctx.dropout(ffn_forward(ctx, layer_norm(ctx, z, &a.norm_ffn1)?, &shared.ffn1)?, rate)?.scale(0.5)?;
    let z1 = z.add(&b1)?;
    let b2 = ctx.dropout(rel_mhsa(ctx, layer_norm(ctx, z1, &a.norm_mhsa)?, &shared.mhsa, layout)?, rate)?;
    let z2 = z1.add(&b2)?;
    let b3 = ctx.dropout(conv_module(ctx, layer_norm(ctx, z2, &a.norm_conv)?, &shared.conv, &a.conv_bn, layout)?, rate)?;
    let z3 = z2.add(&b3)?;
    let x4 = layer_norm(ctx, z3, &a.norm_ffn2)?;
    let (y4, record, labels) = match (&shared.ffn2, &a.router) {
        (SecondFfn::Moe(bank), Some(router)) => {
            let (y, rec, _) = moe_ffn_forward(ctx, x4, bank, router, &layout.mask())?;
            (y, Some(rec), BRANCH_LABELS)
        }
        (SecondFfn::Plain(ffn), None) => (ffn_forward(ctx, x4, ffn)?, None, PLAIN_LABELS),
        _ => return Err(crate::Error::Config("experts and router configuration disagree".into())),
    };
    let b4 = ctx.dropout(y4, rate)?.scale(0.5)?;
    let out = layer_norm(ctx, z3.add(&b4)?, &a.norm_out)?;
    Ok(BlockOutput { out, record, branches: [b1, b2, b3, b4], labels })
}
