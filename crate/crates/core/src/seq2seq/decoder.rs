use crate::error::{Error, Result};
use crate::nn::{absolute_positions, attention, ffn_forward, layer_norm, FfnParams, Layout, MhsaParams, NormParams, ParamBuilder};
use crate::tensor::{Ctx, ParamId, Tensor, Var};

/// Padding id; never predicted.
pub const PAD: usize = 0;
/// Start-of-sentence id, the first input token of every prefix.
pub const SOS: usize = 1;
/// End-of-sentence id, the last target token.
pub const EOS: usize = 2;
/// First id of a regular token.
pub const FIRST_TOKEN: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Includes the pad, sos and eos ids.
    pub vocab: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < FIRST_TOKEN {
            return Err(Error::Config(format!("vocab must be >= 3 (pad, sos, eos), got {}", self.vocab)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("decoder dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("decoder dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: NormParams,
    pub self_attn: MhsaParams,
    pub norm_cross: NormParams,
    pub cross_attn: MhsaParams,
    pub norm_ffn: NormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm_out: NormParams,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

impl Decoder {
    pub fn build(config: &DecoderConfig, b: &mut ParamBuilder<'_>) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.dim, config.vocab);
        let embedding = b.weight("embedding", [v, d], d);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut s = b.scope(format!("layers.{l}"));
            layers.push(DecoderLayer {
                norm_self: NormParams::build(&mut s.scope("norm_self"), d),
                self_attn: MhsaParams::build(&mut s.scope("self_attn"), d, config.heads, false)?,
                norm_cross: NormParams::build(&mut s.scope("norm_cross"), d),
                cross_attn: MhsaParams::build(&mut s.scope("cross_attn"), d, config.heads, false)?,
                norm_ffn: NormParams::build(&mut s.scope("norm_ffn"), d),
                ffn: FfnParams::build(&mut s.scope("ffn"), d, config.ffn_dim),
            });
        }
        Ok(Decoder {
            config: config.clone(),
            embedding,
            layers,
            norm_out: NormParams::build(&mut b.scope("norm_out"), d),
            out_weight: b.weight("out_weight", [d, v], d),
            out_bias: b.zeros("out_bias", [v]),
        })
    }
}

/// Logits `[batch·S × vocab]` for every position of every prefix. Prefixes
/// are padded to the longest one; the returned layout marks real positions.
pub fn decoder_forward<'t>(
    ctx: &Ctx<'t>,
    dec: &Decoder,
    prefixes: &[Vec<usize>],
    memory: Var<'t>,
    memory_layout: &Layout,
) -> Result<(Var<'t>, Layout)> {
    let cfg = &dec.config;
    let lengths: Vec<usize> = prefixes.iter().map(Vec::len).collect();
    let steps = lengths.iter().copied().max().unwrap_or(0);
    if steps == 0 || lengths.contains(&0) {
        return Err(Error::Argument("decoder prefixes must be non-empty".into()));
    }
    let mut ids = Vec::with_capacity(prefixes.len() * steps);
    for p in prefixes {
        if let Some(&bad) = p.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::Argument(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
        }
        ids.extend(p);
        ids.extend(std::iter::repeat_n(PAD, steps - p.len()));
    }
    let layout = Layout::new(steps, lengths);
    let positions = absolute_positions(steps, cfg.dim);
    let pe: Vec<f64> = (0..prefixes.len()).flat_map(|_| positions.data().iter().copied()).collect();
    let pe = ctx.constant(Tensor::new([ids.len(), cfg.dim], pe)?);

    let mut x = ctx.param(dec.embedding).select_rows(&ids)?.add(&pe)?;
    for layer in &dec.layers {
        let q = layer_norm(ctx, x, &layer.norm_self)?;
        let a = attention(ctx, &layer.self_attn, q, &layout, q, &layout, true)?;
        x = x.add(&ctx.dropout(a, cfg.dropout)?)?;
        let q = layer_norm(ctx, x, &layer.norm_cross)?;
        let a = attention(ctx, &layer.cross_attn, q, &layout, memory, memory_layout, false)?;
        x = x.add(&ctx.dropout(a, cfg.dropout)?)?;
        let f = ffn_forward(ctx, layer_norm(ctx, x, &layer.norm_ffn)?, &layer.ffn)?;
        x = x.add(&ctx.dropout(f, cfg.dropout)?)?;
    }
    let logits = layer_norm(ctx, x, &dec.norm_out)?
        .matmul(&ctx.param(dec.out_weight))?
        .add_row(&ctx.param(dec.out_bias))?;
    Ok((logits, layout))
}
