//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use moe_conformer::encoder::{Encoder, EncoderConfig};
use moe_conformer::nn::ParamBuilder;
use moe_conformer::tensor::{Ctx, Mode, ParamId, ParamKind, ParamStore, Rng, Stream, Tape, Tensor, Var};

pub fn encoder_config(blocks: usize, groups: usize, experts: usize, dim: usize) -> EncoderConfig {
    EncoderConfig {
        blocks,
        groups,
        experts,
        dim,
        heads: 2,
        kernel: 3,
        ffn_dim: 2 * dim,
        conv_expansion: 2,
        dropout: 0.0,
        noise_std: 0.0,
        share_norms: false,
        share_routers: false,
        feature_dim: 8,
        frontend_channels: 2,
    }
}

pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> (ParamStore, Encoder) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed).fork(Stream::Init, 0);
    let enc = Encoder::build(cfg, &mut ParamBuilder::new(&mut store, &mut rng).scope("encoder")).unwrap();
    (store, enc)
}

/// Adds uniform noise to every trainable entry so that norm gains, biases
/// and zero-initialized weights all carry gradient-relevant values.
pub fn jitter(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut rng = Rng::new(seed).fork(Stream::Test, 99);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.entry(id).kind == ParamKind::Weight {
            let shape = store.get(id).shape().to_vec();
            let noise = rng.uniform_tensor(shape, amount);
            for (v, e) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
                *v += e;
            }
        }
    }
}

pub fn features(frames: usize, dim: usize, seed: u64) -> Tensor {
    Rng::new(seed).fork(Stream::Test, 1).uniform_tensor([frames, dim], 1.0)
}

/// Physically unrolled copy of a shared encoder: `C·G` blocks in one group,
/// block `g·C + c` holding copies of position `c`'s shared weights and of
/// the `(g, c)` norms and router. Returns the copy and, for every source
/// entry, the copy entries it was written to.
pub fn unroll(store: &ParamStore, enc: &Encoder) -> (ParamStore, Encoder, BTreeMap<ParamId, Vec<ParamId>>) {
    let c_n = enc.config.blocks;
    let g_n = enc.config.groups;
    let cfg = EncoderConfig { blocks: c_n * g_n, groups: 1, share_norms: false, share_routers: false, ..enc.config.clone() };
    let (mut copy, unrolled) = build_encoder(&cfg, 12345);
    let mut map: BTreeMap<ParamId, Vec<ParamId>> = BTreeMap::new();
    let mut pairs: Vec<(ParamId, ParamId)> = enc.frontend.ids().into_iter().zip(unrolled.frontend.ids()).collect();
    for g in 0..g_n {
        for c in 0..c_n {
            let src = enc.block_entries(g, c);
            let dst = unrolled.block_entries(0, g * c_n + c);
            assert_eq!(src.len(), dst.len());
            pairs.extend(src.into_iter().zip(dst));
        }
    }
    for (src, dst) in pairs {
        copy.set(dst, store.get(src).clone()).unwrap();
        let targets = map.entry(src).or_default();
        if !targets.contains(&dst) {
            targets.push(dst);
        }
    }
    (copy, unrolled, map)
}

/// Loss closure for [`gradient_error`]: returns the scalar loss and a
/// routing signature that must not change under perturbation.
pub type LossFn<'f> = dyn for<'t> Fn(&Ctx<'t>) -> (Var<'t>, Vec<usize>) + 'f;

fn eval_loss(store: &ParamStore, mode: Mode, f: &LossFn<'_>) -> (f64, Vec<usize>) {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, mode, &Rng::new(0));
    let (loss, pin) = f(&ctx);
    let v = loss.value().data()[0];
    (v, pin)
}

/// Some tensors have an exactly zero gradient (attention key biases, which
/// softmax cancels; the depthwise bias, which batch norm removes). Their
/// central differences are pure rounding noise, around 1e-10, so the
/// denominator is floored well above that and well below any real gradient.
pub const NOISE_FLOOR: f64 = 1e-5;

/// Largest relative error, over `ids`, between analytic gradients and
/// central differences. Each tensor contributes
/// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, NOISE_FLOOR)` over
/// up to `max_coords` evenly spread coordinates. Panics if any perturbation
/// changes the routing signature.
pub fn gradient_error(store: &ParamStore, ids: &[ParamId], mode: Mode, max_coords: usize, f: &LossFn<'_>) -> f64 {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, mode, &Rng::new(0));
    let (loss, pin) = f(&ctx);
    let grads = ctx.param_grads(&tape.backward(loss).unwrap());
    let h = 1e-5;
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).numel();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        let coords: Vec<usize> = if n <= max_coords { (0..n).collect() } else { (0..max_coords).map(|i| i * n / max_coords).collect() };
        let (mut diff, mut scale) = (0.0, 0.0);
        for k in coords {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let (lp, pp) = eval_loss(&probe, mode, f);
            probe.get_mut(id).data_mut()[k] = orig - h;
            let (lm, pm) = eval_loss(&probe, mode, f);
            probe.get_mut(id).data_mut()[k] = orig;
            assert!(pp == pin && pm == pin, "routing changed when perturbing {}", store.entry(id).name);
            let num = (lp - lm) / (2.0 * h);
            let a = analytic.data()[k];
            diff += (a - num).powi(2);
            scale += a * a + num * num;
        }
        let err = diff.sqrt() / scale.sqrt().max(NOISE_FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// A fixed random projection so that losses depend on every output entry.
pub fn probe_loss<'t>(ctx: &Ctx<'t>, x: Var<'t>, seed: u64) -> Var<'t> {
    let w = Rng::new(seed).fork(Stream::Test, 7).uniform_tensor(x.shape(), 1.0);
    x.mul(&ctx.constant(w)).unwrap().sum().unwrap()
}

/// Flat desk config for tiny end-to-end runs. Keys set in `extra` replace
/// the base values.
pub fn tiny_config_text(extra: &str) -> String {
    let base = "encoder.dim = 16\nencoder.heads = 2\nencoder.ffn_dim = 32\nencoder.kernel = 5\nencoder.feature_dim = 8\n\
                encoder.frontend_channels = 2\ndecoder.ffn_dim = 32\ndecoder.heads = 2\ndecoder.vocab = 7\n\
                train.batch_size = 4\ntrain.epochs = 2\noptim.warmup = 10\nsynth.train_utterances = 12\n\
                synth.test_utterances = 4\ndata.train = data/train\ndata.test = data/test\noutput.dir = out\n";
    let key = |line: &str| line.split('=').next().unwrap_or("").trim().to_owned();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    text.push_str(extra);
    text
}
