//! The MoE-conformer encoder with cross-layer sharing.
//!
//! `C` blocks form one group that is applied `G` times. Attention,
//! convolution, feed-forward and expert weights belong to the block position
//! `c` and are reused by every group; layer norms, the convolution batch norm
//! and the router are individual per `(g, c)` unless the share flags say
//! otherwise.

mod block;
mod profile;
mod report;

pub use block::{conformer_block_forward, BlockAdapters, BlockOutput, SecondFfn, SharedBlock, BRANCH_LABELS};
pub use profile::{l2_distance_profile, profile_csv, ProfileRow};
pub use report::{count_params, ParamReport};

use crate::error::{Error, Result};
use crate::moe::RouterRecord;
use crate::nn::{subsample_frontend_batch, FrontendParams, Layout, ParamBuilder};
use crate::tensor::{Ctx, ParamId, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Blocks per group (`C`).
    pub blocks: usize,
    /// Number of times the group is applied (`G`).
    pub groups: usize,
    /// Experts in the second FFN; 1 means a plain FFN without router.
    pub experts: usize,
    pub dim: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ffn_dim: usize,
    /// Convolution inner width as a multiple of `dim`.
    pub conv_expansion: usize,
    pub dropout: f64,
    pub noise_std: f64,
    pub share_norms: bool,
    pub share_routers: bool,
    pub feature_dim: usize,
    pub frontend_channels: usize,
}

impl EncoderConfig {
    /// Dimensions used for the parameter-count comparisons.
    pub fn full_size() -> Self {
        EncoderConfig {
            blocks: 12,
            groups: 1,
            experts: 1,
            dim: 256,
            heads: 4,
            kernel: 15,
            ffn_dim: 1024,
            conv_expansion: 2,
            dropout: 0.1,
            noise_std: 0.1,
            share_norms: false,
            share_routers: false,
            feature_dim: 80,
            frontend_channels: 32,
        }
    }

    pub fn conv_channels(&self) -> usize {
        self.conv_expansion * self.dim
    }

    pub fn is_moe(&self) -> bool {
        self.experts > 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.groups == 0 || self.experts == 0 {
            return fail(format!(
                "blocks, groups and experts must be >= 1 (got {}, {}, {})",
                self.blocks, self.groups, self.experts
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("conv kernel must be odd, got {}", self.kernel));
        }
        if self.ffn_dim == 0 || self.conv_expansion == 0 || self.frontend_channels == 0 {
            return fail("ffn_dim, conv_expansion and frontend_channels must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.noise_std >= 0.0) {
            return fail(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if crate::nn::subsampled_len(self.feature_dim).is_none() {
            return fail(format!("feature_dim {} is too small for the frontend", self.feature_dim));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub frontend: FrontendParams,
    /// One per block position `c`.
    pub blocks: Vec<SharedBlock>,
    /// Indexed `[g][c]`.
    pub adapters: Vec<Vec<BlockAdapters>>,
}

impl Encoder {
    /// Creates all encoder parameters under the builder's prefix.
    pub fn build(config: &EncoderConfig, b: &mut ParamBuilder<'_>) -> Result<Self> {
        config.validate()?;
        let frontend =
            FrontendParams::build(&mut b.scope("frontend"), config.feature_dim, config.frontend_channels, config.dim)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for c in 0..config.blocks {
            blocks.push(SharedBlock::build(&mut b.scope(format!("blocks.{c}")), config)?);
        }
        let mut adapters: Vec<Vec<BlockAdapters>> = Vec::with_capacity(config.groups);
        for g in 0..config.groups {
            let mut row = Vec::with_capacity(config.blocks);
            for c in 0..config.blocks {
                let first = adapters.first().map(|a| &a[c]);
                row.push(BlockAdapters::build(b, config, g, c, first)?);
            }
            adapters.push(row);
        }
        Ok(Encoder { config: config.clone(), frontend, blocks, adapters })
    }

    /// Every store entry of block `(g, c)`, shared fields first, in a fixed
    /// order. Entries are the same ids across groups wherever they are shared.
    pub fn block_entries(&self, g: usize, c: usize) -> Vec<ParamId> {
        let mut ids = self.blocks[c].ids();
        ids.extend(self.adapters[g][c].ids());
        ids
    }

    /// Entries shared by all groups at position `c`.
    pub fn shared_entries(&self, c: usize) -> Vec<ParamId> {
        self.blocks[c].ids()
    }

    /// Trainable and buffer entries of the whole encoder, each once.
    pub fn entries(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.frontend.ids().to_vec();
        for c in 0..self.config.blocks {
            ids.extend(self.blocks[c].ids());
        }
        for row in &self.adapters {
            for a in row {
                ids.extend(a.ids());
            }
        }
        ids.sort_by_key(|id| id.index());
        ids.dedup();
        ids
    }
}

/// One activation of a residual branch, recorded when tracing.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub group: usize,
    pub block: usize,
    pub label: &'static str,
    /// Mean over valid frames of the Euclidean norm of the branch's
    /// contribution to the residual stream.
    pub distance: f64,
}

pub struct EncoderOutput<'t> {
    /// `[batch·T' × dim]`.
    pub hidden: Var<'t>,
    pub layout: Layout,
    /// Router records grouped by block position, one per group application.
    /// Empty when the encoder has no MoE.
    pub records: Vec<Vec<RouterRecord<'t>>>,
    pub trace: Option<Vec<TraceEntry>>,
}

/// Frontend, then block `(g, c)` for `g` in `0..G`, `c` in `0..C`.
pub fn encoder_forward<'t>(
    ctx: &Ctx<'t>,
    enc: &Encoder,
    features: &[Tensor],
    trace: bool,
) -> Result<EncoderOutput<'t>> {
    let (mut z, layout) = subsample_frontend_batch(ctx, features, &enc.frontend)?;
    let cfg = &enc.config;
    let mut records: Vec<Vec<RouterRecord<'t>>> = vec![Vec::new(); if cfg.is_moe() { cfg.blocks } else { 0 }];
    let mut entries = trace.then(Vec::new);
    for g in 0..cfg.groups {
        for c in 0..cfg.blocks {
            let out = conformer_block_forward(ctx, z, &enc.blocks[c], &enc.adapters[g][c], cfg, &layout)?;
            if let Some(rec) = out.record {
                records[c].push(rec);
            }
            if let Some(list) = entries.as_mut() {
                for (label, branch) in out.labels.iter().zip(&out.branches) {
                    list.push(TraceEntry { group: g, block: c, label, distance: mean_row_norm(&branch.value(), &layout) });
                }
            }
            z = out.out;
        }
    }
    Ok(EncoderOutput { hidden: z, layout, records, trace: entries })
}

fn mean_row_norm(x: &Tensor, layout: &Layout) -> f64 {
    let rows = layout.valid_rows();
    let total: f64 = rows.iter().map(|&r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
    total / rows.len() as f64
}
