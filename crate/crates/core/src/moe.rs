//! Top-1 mixture-of-experts feed-forward layer.
//!
//! A linear router scores every token against `E` experts; the token is
//! served by the argmax expert alone and its output is scaled by that
//! expert's gate value. Only the selected expert runs, so per-token compute
//! does not grow with `E`.

use crate::error::{Error, Result};
use crate::nn::{ffn_forward, FfnParams, ParamBuilder};
use crate::tensor::{gaussian, Ctx, ParamId, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    /// `[dim × experts]`, no bias.
    pub weight: ParamId,
    pub experts: usize,
    /// Std of the Gaussian noise added to the logits in train mode.
    pub noise_std: f64,
}

impl RouterParams {
    pub fn build(b: &mut ParamBuilder<'_>, dim: usize, experts: usize, noise_std: f64) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("a router needs at least one expert".into()));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::Config(format!("gate noise std must be >= 0, got {noise_std}")));
        }
        Ok(RouterParams { weight: b.weight("weight", [dim, experts], dim), experts, noise_std })
    }

    pub fn count(dim: usize, experts: usize) -> usize {
        dim * experts
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertBank {
    pub experts: Vec<FfnParams>,
}

impl ExpertBank {
    pub fn build(b: &mut ParamBuilder<'_>, dim: usize, hidden: usize, experts: usize) -> Self {
        ExpertBank { experts: (0..experts).map(|e| FfnParams::build(&mut b.scope(e.to_string()), dim, hidden)).collect() }
    }

    pub fn count(dim: usize, hidden: usize, experts: usize) -> usize {
        experts * FfnParams::count(dim, hidden)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(FfnParams::ids).collect()
    }
}

/// Gates and decisions of one router application.
#[derive(Clone, Debug)]
pub struct Route<'t> {
    /// `[rows × experts]` softmax probabilities.
    pub gates: Var<'t>,
    pub selected: Vec<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn route<'t>(ctx: &Ctx<'t>, z: Var<'t>, r: &RouterParams) -> Result<Route<'t>> {
    let mut logits = z.matmul(&ctx.param(r.weight))?;
    if ctx.is_train() && r.noise_std > 0.0 {
        let shape = logits.shape();
        let noise = ctx.with_noise_rng(|rng| gaussian(rng, shape, r.noise_std))?;
        logits = logits.add(&ctx.constant(noise))?;
    }
    let gates = logits.softmax(None)?;
    let g = gates.value();
    let selected = (0..g.rows_cols().0).map(|t| argmax(g.row(t))).collect();
    Ok(Route { gates, selected })
}

/// Everything the balance loss and the metrics log need from one MoE call.
#[derive(Clone, Debug)]
pub struct RouterRecord<'t> {
    pub gates: Var<'t>,
    pub selected: Vec<usize>,
    pub mask: Vec<bool>,
}

impl RouterRecord<'_> {
    pub fn stats(&self) -> Result<RouterStats> {
        collect_router_stats(&self.gates.value(), &self.selected, &self.mask)
    }
}

/// Work done by one MoE call, split so the router's `dim·E` term can be
/// told apart from the expert computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MoeCost {
    pub router_flops: u64,
    pub expert_flops: u64,
    /// Tokens that were dispatched (valid rows).
    pub tokens: usize,
    /// Expert weights read per dispatched token.
    pub params_per_token: usize,
}

/// `out_t = g_{t,i*} · FFN_{i*}(z_t)` for valid rows; padded rows produce
/// zeros and are not dispatched.
pub fn moe_ffn_forward<'t>(
    ctx: &Ctx<'t>,
    z: Var<'t>,
    bank: &ExpertBank,
    r: &RouterParams,
    mask: &[bool],
) -> Result<(Var<'t>, RouterRecord<'t>, MoeCost)> {
    let shape = z.shape();
    let (rows, dim) = (shape[0], shape[1]);
    if mask.len() != rows {
        return Err(Error::Shape(format!("moe: mask of {} for {rows} rows", mask.len())));
    }
    if bank.len() != r.experts {
        return Err(Error::Shape(format!("moe: router for {} experts, bank of {}", r.experts, bank.len())));
    }
    let tape = ctx.tape();
    let start = tape.flops();
    let Route { gates, selected } = route(ctx, z, r)?;
    let after_router = tape.flops();

    let experts = r.experts;
    let zero_row = ctx.constant(Tensor::zeros([1, dim]));
    let mut parts = Vec::new();
    // position of each row inside the concatenation of expert outputs
    let mut slot = vec![usize::MAX; rows];
    let mut filled = 0;
    for (e, expert) in bank.experts.iter().enumerate() {
        let members: Vec<usize> = (0..rows).filter(|&t| mask[t] && selected[t] == e).collect();
        if members.is_empty() {
            continue;
        }
        let x = z.select_rows(&members)?;
        let g = gates.gather(members.iter().map(|&t| t * experts + e).collect(), [members.len()])?;
        parts.push(ffn_forward(ctx, x, expert)?.scale_rows(&g)?);
        for (k, &t) in members.iter().enumerate() {
            slot[t] = filled + k;
        }
        filled += members.len();
    }
    parts.push(zero_row);
    let stacked = Var::concat_rows(&parts)?;
    let idx = (0..rows)
        .flat_map(|t| {
            let src = if slot[t] == usize::MAX { filled } else { slot[t] };
            src * dim..(src + 1) * dim
        })
        .collect();
    let out = stacked.gather(idx, [rows, dim])?;

    let hidden = ctx.store().get(bank.experts[0].b1).numel();
    let cost = MoeCost {
        router_flops: after_router - start,
        expert_flops: tape.flops() - after_router,
        tokens: filled,
        params_per_token: FfnParams::count(dim, hidden),
    };
    Ok((out, RouterRecord { gates, selected, mask: mask.to_vec() }, cost))
}

/// Activation frequency `f` and mean gate `ḡ` over the valid tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterStats {
    pub freq: Vec<f64>,
    pub mean_gate: Vec<f64>,
    pub tokens: usize,
}

pub fn collect_router_stats(gates: &Tensor, selected: &[usize], mask: &[bool]) -> Result<RouterStats> {
    let (rows, experts) = gates.rows_cols();
    if selected.len() != rows || mask.len() != rows {
        return Err(Error::Shape(format!(
            "router stats: {rows} gate rows, {} selections, {} mask entries",
            selected.len(),
            mask.len()
        )));
    }
    let mut counts = vec![0usize; experts];
    let mut sums = vec![0.0; experts];
    let mut tokens = 0;
    for t in (0..rows).filter(|&t| mask[t]) {
        tokens += 1;
        counts[selected[t]] += 1;
        for (s, g) in sums.iter_mut().zip(gates.row(t)) {
            *s += g;
        }
    }
    if tokens == 0 {
        return Err(Error::Usage("router statistics need at least one valid token".into()));
    }
    let n = tokens as f64;
    Ok(RouterStats {
        freq: counts.iter().map(|&c| c as f64 / n).collect(),
        mean_gate: sums.iter().map(|s| s / n).collect(),
        tokens,
    })
}

/// Statistics over the valid tokens of several applications of one module.
pub fn pooled_stats(records: &[RouterRecord<'_>]) -> Result<RouterStats> {
    let mut rows = Vec::new();
    let mut selected = Vec::new();
    for rec in records {
        let g = rec.gates.value();
        for t in (0..rec.mask.len()).filter(|&t| rec.mask[t]) {
            rows.push(g.row(t).to_vec());
            selected.push(rec.selected[t]);
        }
    }
    if rows.is_empty() {
        return Err(Error::Usage("router statistics need at least one valid token".into()));
    }
    let mask = vec![true; rows.len()];
    collect_router_stats(&Tensor::from_rows(&rows)?, &selected, &mask)
}

/// `E·Σ f_i·ḡ_i`.
pub fn load_balance_loss(stats: &RouterStats) -> Result<f64> {
    if stats.tokens == 0 {
        return Err(Error::Usage("balance loss of an empty batch".into()));
    }
    let e = stats.freq.len() as f64;
    Ok(e * stats.freq.iter().zip(&stats.mean_gate).map(|(f, g)| f * g).sum::<f64>())
}

/// Balance loss on the tape, pooling the valid tokens of several
/// applications of one MoE module. `f` is a constant; the gradient flows
/// through `ḡ` only.
pub fn balance_loss_var<'t>(ctx: &Ctx<'t>, records: &[&RouterRecord<'t>]) -> Result<Var<'t>> {
    let first = records.first().ok_or_else(|| Error::Usage("balance loss of no router records".into()))?;
    let experts = first.gates.shape()[1];
    let tokens: usize = records.iter().map(|r| r.mask.iter().filter(|&&m| m).count()).sum();
    if tokens == 0 {
        return Err(Error::Usage("balance loss of an empty batch".into()));
    }
    let n = tokens as f64;
    let mut counts = vec![0.0; experts];
    let mut mean_gate: Option<Var<'t>> = None;
    for rec in records {
        for (t, _) in rec.mask.iter().enumerate().filter(|(_, &m)| m) {
            counts[rec.selected[t]] += 1.0;
        }
        let w = rec.mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect();
        let w = ctx.constant(Tensor::new([1, rec.mask.len()], w)?);
        let part = w.matmul(&rec.gates)?;
        mean_gate = Some(match mean_gate {
            Some(acc) => acc.add(&part)?,
            None => part,
        });
    }
    let coef = ctx.constant(Tensor::new([1, experts], counts.iter().map(|c| experts as f64 * c / n).collect())?);
    mean_gate.expect("at least one record").mul(&coef)?.sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, ParamStore, Rng, Stream, Tape};

    struct Setup {
        store: ParamStore,
        bank: ExpertBank,
        router: RouterParams,
    }

    fn setup(dim: usize, hidden: usize, experts: usize, noise: f64, seed: u64) -> Setup {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let bank = ExpertBank::build(&mut b.scope("experts"), dim, hidden, experts);
        let router = RouterParams::build(&mut b.scope("router"), dim, experts, noise).unwrap();
        Setup { store, bank, router }
    }

    fn input(rows: usize, dim: usize, seed: u64) -> Tensor {
        Rng::new(seed).fork(Stream::Test, 0).uniform_tensor([rows, dim], 1.0)
    }

    #[test]
    fn route_softmax_example() {
        let mut s = setup(4, 3, 4, 0.0, 0);
        s.store.set(s.router.weight, Tensor::eye(4)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &s.store);
        let z = ctx.constant(Tensor::new([1, 4], vec![2.0, 0.0, 0.0, 0.0]).unwrap());
        let r = route(&ctx, z, &s.router).unwrap();
        assert_eq!(r.selected, vec![0]);
        for (g, e) in r.gates.value().data().iter().zip([0.71123, 0.09626, 0.09626, 0.09626]) {
            assert!((g - e).abs() < 1e-5);
        }
    }

    #[test]
    fn exact_ties_pick_lowest_index() {
        let mut s = setup(4, 3, 4, 0.0, 0);
        s.store.set(s.router.weight, Tensor::zeros([4, 4])).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &s.store);
        let r = route(&ctx, ctx.constant(input(6, 4, 1)), &s.router).unwrap();
        assert_eq!(r.selected, vec![0; 6]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn eval_routing_ignores_rng() {
        let s = setup(4, 3, 4, 0.5, 0);
        let x = input(8, 4, 2);
        let run = |seed| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &s.store, Mode::Eval, &Rng::new(seed));
            let r = route(&ctx, ctx.constant(x.clone()), &s.router).unwrap();
            ((*r.gates.value()).clone(), r.selected)
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn gate_noise_explores_only_when_enabled() {
        let decisions = |noise: f64, seed: u64| {
            let mut s = setup(4, 3, 2, noise, 0);
            // near-tie logits
            s.store.set(s.router.weight, Tensor::filled([4, 2], 0.0)).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &s.store, Mode::Train, &Rng::new(seed));
            route(&ctx, ctx.constant(input(16, 4, 3)), &s.router).unwrap().selected
        };
        let noisy: Vec<_> = (0..4).map(|seed| decisions(0.1, seed)).collect();
        assert!(noisy.iter().any(|d| d != &noisy[0]));
        assert!(noisy.iter().flatten().any(|&e| e == 1));
        let clean: Vec<_> = (0..4).map(|seed| decisions(0.0, seed)).collect();
        assert!(clean.iter().all(|d| d == &vec![0; 16]));
    }

    #[test]
    fn single_expert_equals_plain_ffn() {
        let s = setup(5, 7, 1, 0.1, 4);
        let x = input(6, 5, 5);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s.store, Mode::Train, &Rng::new(9));
        let (out, rec, _) = moe_ffn_forward(&ctx, ctx.constant(x.clone()), &s.bank, &s.router, &[true; 6]).unwrap();
        assert!(rec.gates.value().data().iter().all(|&g| g == 1.0));
        let plain = ffn_forward(&ctx, ctx.constant(x), &s.bank.experts[0]).unwrap();
        assert_eq!(out.value().data(), plain.value().data());
    }

    /// Runs every expert on every row, then keeps the argmax one.
    fn dense_oracle(store: &ParamStore, bank: &ExpertBank, router: &RouterParams, x: &Tensor) -> Tensor {
        let (rows, dim) = x.rows_cols();
        let wr = store.get(router.weight);
        let mut out = Tensor::zeros([rows, dim]);
        for t in 0..rows {
            let logits: Vec<f64> =
                (0..router.experts).map(|e| (0..dim).map(|k| x.row(t)[k] * wr.row(k)[e]).sum()).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let gates: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
            let best = argmax(&gates);
            let ffn = &bank.experts[best];
            let (w1, b1, w2, b2) = (store.get(ffn.w1), store.get(ffn.b1), store.get(ffn.w2), store.get(ffn.b2));
            let hidden = b1.numel();
            let h: Vec<f64> = (0..hidden)
                .map(|j| {
                    let a = b1.data()[j] + (0..dim).map(|k| x.row(t)[k] * w1.row(k)[j]).sum::<f64>();
                    a / (1.0 + (-a).exp())
                })
                .collect();
            for c in 0..dim {
                let y = b2.data()[c] + (0..hidden).map(|j| h[j] * w2.row(j)[c]).sum::<f64>();
                out.data_mut()[t * dim + c] = gates[best] * y;
            }
        }
        out
    }

    #[test]
    fn matches_dense_oracle() {
        let s = setup(6, 5, 4, 0.1, 11);
        let x = input(20, 6, 12);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &s.store);
        let (out, rec, _) = moe_ffn_forward(&ctx, ctx.constant(x.clone()), &s.bank, &s.router, &[true; 20]).unwrap();
        let mut used = rec.selected.clone();
        used.sort();
        used.dedup();
        assert!(used.len() > 1, "test input should exercise several experts");
        assert!(out.value().max_abs_diff(&dense_oracle(&s.store, &s.bank, &s.router, &x)) < 1e-6);
    }

    #[test]
    fn unselected_experts_get_zero_gradient() {
        let s = setup(4, 3, 4, 0.0, 21);
        let x = input(1, 4, 22);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &s.store);
        let (out, rec, _) = moe_ffn_forward(&ctx, ctx.constant(x), &s.bank, &s.router, &[true]).unwrap();
        let grads = ctx.param_grads(&tape.backward(out.sum().unwrap()).unwrap());
        let chosen = rec.selected[0];
        for (e, expert) in s.bank.experts.iter().enumerate() {
            for id in expert.ids() {
                let touched = grads.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
                assert_eq!(touched, e == chosen, "expert {e}");
            }
        }
        assert!(grads.get(s.router.weight).is_some());
    }

    #[test]
    fn padded_rows_are_zero_and_not_dispatched() {
        let s = setup(4, 3, 3, 0.0, 31);
        let x = input(5, 4, 32);
        let mask = [true, true, false, true, false];
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &s.store);
        let (out, _, cost) = moe_ffn_forward(&ctx, ctx.constant(x), &s.bank, &s.router, &mask).unwrap();
        assert_eq!(cost.tokens, 3);
        for t in [2, 4] {
            assert!(out.value().row(t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn expert_compute_is_independent_of_expert_count() {
        let cost = |experts| {
            let s = setup(8, 16, experts, 0.0, 41);
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &s.store);
            moe_ffn_forward(&ctx, ctx.constant(input(10, 8, 42)), &s.bank, &s.router, &[true; 10]).unwrap().2
        };
        let (one, four) = (cost(1), cost(4));
        assert_eq!(one.expert_flops, four.expert_flops);
        assert_eq!(one.params_per_token, four.params_per_token);
        assert_eq!(one.expert_flops, 10 * 2 * 8 * 16);
        assert_eq!(four.router_flops, 10 * 8 * 4);
    }

    fn stats_of(gates: &[[f64; 2]]) -> RouterStats {
        let rows: Vec<Vec<f64>> = gates.iter().map(|g| g.to_vec()).collect();
        let g = Tensor::from_rows(&rows).unwrap();
        let sel: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
        collect_router_stats(&g, &sel, &vec![true; rows.len()]).unwrap()
    }

    #[test]
    fn balance_loss_hand_case() {
        let stats = stats_of(&[[0.9, 0.1], [0.8, 0.2], [0.6, 0.4], [0.3, 0.7]]);
        assert_eq!(stats.freq, vec![0.75, 0.25]);
        assert!((stats.mean_gate[0] - 0.65).abs() < 1e-12);
        assert!((load_balance_loss(&stats).unwrap() - 1.15).abs() < 1e-9);
    }

    #[test]
    fn balance_loss_extremes() {
        for e in [1usize, 2, 4, 8] {
            let u = 1.0 / e as f64;
            let uniform = RouterStats { freq: vec![u; e], mean_gate: vec![u; e], tokens: e };
            assert_eq!(load_balance_loss(&uniform).unwrap(), 1.0);
            let mut one_hot = vec![0.0; e];
            one_hot[0] = 1.0;
            let collapse = RouterStats { freq: one_hot.clone(), mean_gate: one_hot, tokens: 3 };
            assert_eq!(load_balance_loss(&collapse).unwrap(), e as f64);
        }
    }

    #[test]
    fn empty_batch_is_a_usage_error() {
        let g = Tensor::filled([2, 2], 0.5);
        assert!(matches!(collect_router_stats(&g, &[0, 0], &[false, false]), Err(Error::Usage(_))));
        let empty = RouterStats { freq: vec![0.0; 2], mean_gate: vec![0.0; 2], tokens: 0 };
        assert!(matches!(load_balance_loss(&empty), Err(Error::Usage(_))));
    }

    #[test]
    fn stats_ignore_padding_routes() {
        let g = Tensor::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        let base = collect_router_stats(&g, &[0, 1, 0], &[true, true, true]).unwrap();
        let padded = Tensor::from_rows(&[
            vec![0.7, 0.3],
            vec![0.01, 0.99],
            vec![0.2, 0.8],
            vec![0.5, 0.5],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let with_pad = collect_router_stats(&padded, &[0, 1, 1, 0, 1], &[true, false, true, true, false]).unwrap();
        assert_eq!(base, with_pad);
        let all_zero = collect_router_stats(&g, &[0, 0, 0], &[true; 3]).unwrap();
        assert_eq!(all_zero.freq, vec![1.0, 0.0]);
    }

    #[test]
    fn tape_balance_loss_pools_records() {
        let s = setup(4, 3, 3, 0.0, 51);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &s.store);
        let a = moe_ffn_forward(&ctx, ctx.constant(input(5, 4, 1)), &s.bank, &s.router, &[true, true, true, false, true]);
        let b = moe_ffn_forward(&ctx, ctx.constant(input(3, 4, 2)), &s.bank, &s.router, &[true; 3]);
        let (ra, rb) = (a.unwrap().1, b.unwrap().1);
        let loss = balance_loss_var(&ctx, &[&ra, &rb]).unwrap();

        let pooled = pooled_stats(&[ra.clone(), rb.clone()]).unwrap();
        assert_eq!(pooled.tokens, 7);
        assert!((loss.value().data()[0] - load_balance_loss(&pooled).unwrap()).abs() < 1e-12);
    }
}
