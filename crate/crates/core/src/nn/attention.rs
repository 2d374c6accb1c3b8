use std::rc::Rc;

use super::{Layout, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, Tensor, Var};

/// Relative-position parameters: projection of the sinusoidal distance
/// embeddings and the global content/position biases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelPosParams {
    pub wpos: ParamId,
    pub pos_bias_u: ParamId,
    pub pos_bias_v: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MhsaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub rel: Option<RelPosParams>,
}

impl MhsaParams {
    pub fn build(b: &mut ParamBuilder<'_>, dim: usize, heads: usize, relative: bool) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {dim} is not divisible by {heads} heads")));
        }
        let mut proj = |name: &str| (b.weight(&format!("w{name}"), [dim, dim], dim), b.zeros(&format!("b{name}"), [dim]));
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        let rel = relative.then(|| RelPosParams {
            wpos: b.weight("wpos", [dim, dim], dim),
            pos_bias_u: b.zeros("pos_bias_u", [dim]),
            pos_bias_v: b.zeros("pos_bias_v", [dim]),
        });
        Ok(MhsaParams { wq, bq, wk, bk, wv, bv, wo, bo, heads, rel })
    }

    pub fn count(dim: usize, relative: bool) -> usize {
        4 * (dim * dim + dim) + if relative { dim * dim + 2 * dim } else { 0 }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo];
        if let Some(r) = &self.rel {
            ids.extend([r.wpos, r.pos_bias_u, r.pos_bias_v]);
        }
        ids
    }
}

fn sinusoid(position: f64, dim: usize, out: &mut [f64]) {
    for i in 0..dim / 2 {
        let freq = (10000f64).powf(-((2 * i) as f64) / dim as f64);
        out[2 * i] = (position * freq).sin();
        out[2 * i + 1] = (position * freq).cos();
    }
    if dim % 2 == 1 {
        let freq = (10000f64).powf(-((dim - 1) as f64) / dim as f64);
        out[dim - 1] = (position * freq).sin();
    }
}

/// Sinusoidal embeddings of relative distances `T-1, T-2, …, -(T-1)`:
/// row `r` encodes distance `T-1-r`.
pub fn relative_positions(time: usize, dim: usize) -> Tensor {
    let rows = 2 * time - 1;
    let mut t = Tensor::zeros([rows, dim]);
    for r in 0..rows {
        let dist = time as f64 - 1.0 - r as f64;
        sinusoid(dist, dim, &mut t.data_mut()[r * dim..(r + 1) * dim]);
    }
    t
}

/// Sinusoidal embeddings of absolute positions `0..len`.
pub fn absolute_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros([len, dim]);
    for p in 0..len {
        sinusoid(p as f64, dim, &mut t.data_mut()[p * dim..(p + 1) * dim]);
    }
    t
}

/// Self-attention with relative-position scoring:
/// `score(i, j) = ((q_i + u)·k_j + (q_i + v)·r_{i-j}) / sqrt(d_head)`.
pub fn rel_mhsa<'t>(ctx: &Ctx<'t>, z: Var<'t>, p: &MhsaParams, layout: &Layout) -> Result<Var<'t>> {
    if p.rel.is_none() {
        return Err(Error::Usage("rel_mhsa called with parameters lacking relative-position weights".into()));
    }
    Ok(attend(ctx, p, z, layout, z, layout, false, false)?.0)
}

/// Multi-head attention of `query` rows over `memory` rows. Uses the
/// relative-position terms when `p.rel` is set (self-attention only).
pub fn attention<'t>(
    ctx: &Ctx<'t>,
    p: &MhsaParams,
    query: Var<'t>,
    query_layout: &Layout,
    memory: Var<'t>,
    memory_layout: &Layout,
    causal: bool,
) -> Result<Var<'t>> {
    Ok(attend(ctx, p, query, query_layout, memory, memory_layout, causal, false)?.0)
}

/// Same as [`attention`] but also returns every attention matrix, ordered by
/// utterance then head.
pub fn attention_weights<'t>(
    ctx: &Ctx<'t>,
    p: &MhsaParams,
    query: Var<'t>,
    query_layout: &Layout,
    memory: Var<'t>,
    memory_layout: &Layout,
    causal: bool,
) -> Result<(Var<'t>, Vec<Rc<Tensor>>)> {
    attend(ctx, p, query, query_layout, memory, memory_layout, causal, true)
}

#[allow(clippy::too_many_arguments)]
fn attend<'t>(
    ctx: &Ctx<'t>,
    p: &MhsaParams,
    query: Var<'t>,
    ql: &Layout,
    memory: Var<'t>,
    ml: &Layout,
    causal: bool,
    keep_weights: bool,
) -> Result<(Var<'t>, Vec<Rc<Tensor>>)> {
    if ql.batch != ml.batch {
        return Err(Error::Shape(format!("attention: {} queries vs {} memories", ql.batch, ml.batch)));
    }
    let dim = query.shape()[1];
    let heads = p.heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = query.matmul(&ctx.param(p.wq))?.add_row(&ctx.param(p.bq))?;
    let k = memory.matmul(&ctx.param(p.wk))?.add_row(&ctx.param(p.bk))?;
    let v = memory.matmul(&ctx.param(p.wv))?.add_row(&ctx.param(p.bv))?;

    let rel = match &p.rel {
        Some(r) => {
            if ql.time != ml.time {
                return Err(Error::Usage("relative-position attention needs self-attention".into()));
            }
            let pe = ctx.constant(relative_positions(ml.time, dim));
            Some((pe.matmul(&ctx.param(r.wpos))?, ctx.param(r.pos_bias_u), ctx.param(r.pos_bias_v)))
        }
        None => None,
    };

    let (tq, tk) = (ql.time, ml.time);
    let mut weights = Vec::new();
    let mut per_utt = Vec::with_capacity(ql.batch);
    for b in 0..ql.batch {
        let qb = q.rows(b * tq, (b + 1) * tq)?;
        let kb = k.rows(b * tk, (b + 1) * tk)?;
        let vb = v.rows(b * tk, (b + 1) * tk)?;
        let len = ml.lengths[b];
        let mask: Vec<bool> = (0..tq * tk)
            .map(|n| {
                let (i, j) = (n / tk, n % tk);
                j < len && (!causal || j <= i)
            })
            .collect();

        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = qb.cols(lo, hi)?;
            let kt = kb.cols(lo, hi)?.transpose()?;
            let vh = vb.cols(lo, hi)?;
            let scores = match &rel {
                Some((pos, u, vbias)) => {
                    let content = qh.add_row(&u.slice(lo, hi)?)?.matmul(&kt)?;
                    let pt = pos.cols(lo, hi)?.transpose()?;
                    let full = qh.add_row(&vbias.slice(lo, hi)?)?.matmul(&pt)?;
                    let width = 2 * tk - 1;
                    let idx = (0..tq * tk)
                        .map(|n| {
                            let (i, j) = (n / tk, n % tk);
                            i * width + (tk - 1 + j - i)
                        })
                        .collect();
                    content.add(&full.gather(idx, [tq, tk])?)?
                }
                None => qh.matmul(&kt)?,
            };
            let attn = scores.scale(scale)?.softmax(Some(&mask))?;
            if keep_weights {
                weights.push(attn.value());
            }
            head_out.push(attn.matmul(&vh)?);
        }
        per_utt.push(Var::concat_cols(&head_out)?);
    }
    let out = Var::concat_rows(&per_utt)?.matmul(&ctx.param(p.wo))?.add_row(&ctx.param(p.bo))?;
    Ok((out, weights))
}
