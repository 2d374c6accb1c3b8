//! Measurements shared by the test suites and the acceptance runner. Each
//! returns the raw quantity; callers decide the threshold.

use moe_conformer::encoder::{conformer_block_forward, encoder_forward, l2_distance_profile, Encoder};
use moe_conformer::harness::{decode_checkpoint, encode_checkpoint, synth_utterances, ExperimentConfig, Split, Trainer};
use moe_conformer::moe::{balance_loss_var, moe_ffn_forward, ExpertBank, RouterParams};
use moe_conformer::nn::{
    batch_norm, conv_module, ffn_forward, layer_norm, rel_mhsa, subsample_frontend, BatchNormParams, ConvModuleParams,
    FfnParams, FrontendParams, Layout, MhsaParams, NormParams, ParamBuilder,
};
use moe_conformer::seq2seq::{
    beam_search, decoder_forward, greedy_search, kd_loss, nll_loss, total_loss, Decoder, DecoderConfig, LossWeights, Model,
    ModelConfig, EOS, FIRST_TOKEN, SOS,
};
use moe_conformer::tensor::{Ctx, Mode, ParamId, ParamKind, ParamStore, Rng, Stream, Tape, Tensor, Var};

use super::*;

/// Fresh store populated by `build`, jittered so that no entry sits at a
/// special value.
fn store_with<T>(build: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(3).fork(Stream::Init, 0);
    let layer = build(&mut ParamBuilder::new(&mut store, &mut rng));
    jitter(&mut store, 5, 0.2);
    (store, layer)
}

fn input<'t>(ctx: &Ctx<'t>, rows: usize, cols: usize) -> Var<'t> {
    ctx.constant(Rng::new(11).fork(Stream::Test, 0).uniform_tensor([rows, cols], 1.0))
}

fn weights(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| store.entry(id).kind == ParamKind::Weight).collect()
}

/// Finite-difference error of every layer checked in isolation.
pub fn layer_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let (store, p) = store_with(|b| NormParams::build(b, 6));
    out.push((
        "layer_norm",
        gradient_error(&store, &weights(&store), Mode::Eval, 32, &|ctx| {
            (probe_loss(ctx, layer_norm(ctx, input(ctx, 5, 6), &p).unwrap(), 1), vec![])
        }),
    ));

    let (store, p) = store_with(|b| BatchNormParams::build(b, 4));
    let layout = Layout::new(5, vec![5, 3]);
    for (name, mode) in [("batch_norm (train)", Mode::Train), ("batch_norm (eval)", Mode::Eval)] {
        out.push((
            name,
            gradient_error(&store, &weights(&store), mode, 32, &|ctx| {
                (probe_loss(ctx, batch_norm(ctx, input(ctx, 10, 4), &p, &layout).unwrap(), 2), vec![])
            }),
        ));
    }

    let (store, p) = store_with(|b| FfnParams::build(b, 6, 10));
    out.push((
        "ffn",
        gradient_error(&store, &weights(&store), Mode::Eval, 32, &|ctx| {
            (probe_loss(ctx, ffn_forward(ctx, input(ctx, 4, 6), &p).unwrap(), 3), vec![])
        }),
    ));

    let (store, p) = store_with(|b| MhsaParams::build(b, 8, 2, true).unwrap());
    let layout = Layout::new(5, vec![5, 2]);
    out.push((
        "rel_mhsa",
        gradient_error(&store, &weights(&store), Mode::Eval, 24, &|ctx| {
            let y = rel_mhsa(ctx, input(ctx, 10, 8), &p, &layout).unwrap();
            (probe_loss(ctx, y.select_rows(&layout.valid_rows()).unwrap(), 4), vec![])
        }),
    ));

    let (store, (p, bn)) = store_with(|b| {
        (ConvModuleParams::build(&mut b.scope("conv"), 6, 12, 3).unwrap(), BatchNormParams::build(&mut b.scope("bn"), 12))
    });
    let layout = Layout::new(6, vec![6, 4]);
    out.push((
        "conv_module",
        gradient_error(&store, &weights(&store), Mode::Train, 24, &|ctx| {
            let y = conv_module(ctx, input(ctx, 12, 6), &p, &bn, &layout).unwrap();
            (probe_loss(ctx, y.select_rows(&layout.valid_rows()).unwrap(), 5), vec![])
        }),
    ));

    let (store, p) = store_with(|b| FrontendParams::build(b, 8, 2, 6).unwrap());
    let x = features(16, 8, 1);
    out.push((
        "frontend",
        gradient_error(&store, &weights(&store), Mode::Eval, 24, &|ctx| {
            (probe_loss(ctx, subsample_frontend(ctx, &x, &p).unwrap(), 6), vec![])
        }),
    ));

    let (store, (bank, router)) = store_with(|b| {
        (ExpertBank::build(&mut b.scope("experts"), 6, 8, 3), RouterParams::build(&mut b.scope("router"), 6, 3, 0.0).unwrap())
    });
    let mask = vec![true, true, true, false, true, true];
    out.push((
        "moe_ffn + balance",
        gradient_error(&store, &weights(&store), Mode::Eval, 24, &|ctx| {
            let (y, rec, _) = moe_ffn_forward(ctx, input(ctx, 6, 6), &bank, &router, &mask).unwrap();
            let bal = balance_loss_var(ctx, &[&rec]).unwrap();
            (probe_loss(ctx, y, 7).add(&bal.scale(3.0).unwrap()).unwrap(), rec.selected.clone())
        }),
    ));

    let cfg = encoder_config(1, 1, 2, 8);
    let (mut store, enc) = build_encoder(&cfg, 2);
    jitter(&mut store, 6, 0.2);
    let layout = Layout::new(5, vec![5, 4]);
    let all = weights(&store);
    let ids: Vec<ParamId> = enc.block_entries(0, 0).into_iter().filter(|id| all.contains(id)).collect();
    out.push((
        "conformer block",
        gradient_error(&store, &ids, Mode::Train, 12, &|ctx| {
            let y = conformer_block_forward(ctx, input(ctx, 10, 8), &enc.blocks[0], &enc.adapters[0][0], &cfg, &layout).unwrap();
            let pin = y.record.as_ref().unwrap().selected.clone();
            (probe_loss(ctx, y.out.select_rows(&layout.valid_rows()).unwrap(), 8), pin)
        }),
    ));

    let cfg = DecoderConfig { layers: 1, dim: 8, heads: 2, ffn_dim: 12, vocab: 6, dropout: 0.0 };
    let (store, dec) = store_with(|b| Decoder::build(&cfg, b).unwrap());
    let mem_layout = Layout::new(4, vec![4, 3]);
    let prefixes = vec![vec![SOS, 3, 4], vec![SOS, 5]];
    out.push((
        "decoder + nll",
        gradient_error(&store, &weights(&store), Mode::Eval, 12, &|ctx| {
            let (logits, layout) = decoder_forward(ctx, &dec, &prefixes, input(ctx, 8, 8), &mem_layout).unwrap();
            (nll_loss(ctx, logits, &[vec![3, 4, 2], vec![5, 2]], &layout).unwrap(), vec![])
        }),
    ));
    out
}

/// Finite-difference error of the whole objective (NLL, balance and KD) of
/// a tiny model with d=8, C=1, G=2, E=2, V=5 and 12 input frames, in eval
/// and in train mode.
pub fn end_to_end_gradient_errors() -> Vec<(&'static str, f64)> {
    let enc_cfg = encoder_config(1, 2, 2, 8);
    let dec_cfg = DecoderConfig { layers: 1, dim: 8, heads: 2, ffn_dim: 12, vocab: 5, dropout: 0.0 };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4).fork(Stream::Init, 0);
    let (enc, dec) = {
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let enc = Encoder::build(&enc_cfg, &mut b.scope("encoder")).unwrap();
        let dec = Decoder::build(&dec_cfg, &mut b.scope("decoder")).unwrap();
        (enc, dec)
    };
    jitter(&mut store, 8, 0.1);
    let feats = vec![features(12, 8, 3), features(12, 8, 4)];
    let prefixes = vec![vec![SOS, 3, 4], vec![SOS, 4]];
    let targets = vec![vec![3, 4, 2], vec![4, 2]];
    let teacher = Rng::new(9).fork(Stream::Test, 0).uniform_tensor([2 * 2, 8], 1.0);
    let w = LossWeights { alpha: 0.5, beta: 0.5 };
    let ids = weights(&store);
    [("end to end (eval)", Mode::Eval), ("end to end (train)", Mode::Train)]
        .into_iter()
        .map(|(name, mode)| {
            let err = gradient_error(&store, &ids, mode, 6, &|ctx| {
                let out = encoder_forward(ctx, &enc, &feats, false).unwrap();
                let pin: Vec<usize> = out.records.iter().flatten().flat_map(|r| r.selected.clone()).collect();
                let refs: Vec<_> = out.records[0].iter().collect();
                let bal = balance_loss_var(ctx, &refs).unwrap();
                let kd = kd_loss(ctx, out.hidden, ctx.constant(teacher.clone()), &out.layout).unwrap();
                let (logits, layout) = decoder_forward(ctx, &dec, &prefixes, out.hidden, &out.layout).unwrap();
                let nll = nll_loss(ctx, logits, &targets, &layout).unwrap();
                (total_loss(nll, &[bal], Some(kd), w).unwrap(), pin)
            });
            (name, err)
        })
        .collect()
}

/// A jittered shared encoder with C=2 blocks applied over G=3 groups.
pub fn shared_model() -> (ParamStore, Encoder) {
    let (mut store, enc) = build_encoder(&encoder_config(2, 3, 2, 8), 21);
    jitter(&mut store, 22, 0.1);
    (store, enc)
}

fn hidden(store: &ParamStore, enc: &Encoder, feats: &[Tensor], mode: Mode) -> Tensor {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, mode, &Rng::new(0));
    (*encoder_forward(&ctx, enc, feats, false).unwrap().hidden.value()).clone()
}

/// Largest difference between the shared model's output and its unrolled
/// copy's, in the given mode.
pub fn unrolled_forward_gap(mode: Mode) -> f64 {
    let (store, enc) = shared_model();
    let (copy, unrolled, _) = unroll(&store, &enc);
    assert_eq!(unrolled.config.blocks, 6);
    let feats = vec![features(20, 8, 1), features(15, 8, 2)];
    hidden(&store, &enc, &feats, mode).max_abs_diff(&hidden(&copy, &unrolled, &feats, mode))
}

/// Worst relative gap between each shared tensor's gradient and the sum of
/// its copies' gradients in the unrolled model, and how many tensors had
/// one copy per group.
pub fn unrolled_gradient_gap() -> (f64, usize) {
    let (store, enc) = shared_model();
    let (copy, unrolled, map) = unroll(&store, &enc);
    let feats = vec![features(20, 8, 3), features(16, 8, 4)];
    let grads_of = |store: &ParamStore, enc: &Encoder| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let out = encoder_forward(&ctx, enc, &feats, false).unwrap();
        let loss = probe_loss(&ctx, out.hidden, 5);
        ctx.param_grads(&tape.backward(loss).unwrap())
    };
    let gs = grads_of(&store, &enc);
    let gu = grads_of(&copy, &unrolled);
    let (mut worst, mut shared): (f64, usize) = (0.0, 0);
    for (src, dsts) in &map {
        let Some(g) = gs.get(*src) else { continue };
        let mut sum = Tensor::zeros(g.shape().to_vec());
        for d in dsts {
            if let Some(x) = gu.get(*d) {
                for (s, v) in sum.data_mut().iter_mut().zip(x.data()) {
                    *s += v;
                }
            }
        }
        let scale = g.data().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        worst = worst.max(g.max_abs_diff(&sum) / scale);
        if dsts.len() == 3 {
            shared += 1;
        }
    }
    (worst, shared)
}

/// What training a (C=2, G=3) model does to its shared and per-group fields.
pub struct SharingAfterTraining {
    pub steps: u64,
    /// Shared fields read back from a checkpoint are byte-identical across
    /// groups at every block position.
    pub shared_identical: bool,
    /// Some per-group norm parameter differs between groups.
    pub norms_differ: bool,
    /// No group other than the first owns a copy of a shared field.
    pub single_copy: bool,
}

pub fn train_shared_model(min_steps: u64) -> SharingAfterTraining {
    let cfg = ExperimentConfig::parse(&tiny_config_text("encoder.blocks = 2\nencoder.groups = 3\nencoder.experts = 2\n")).unwrap();
    let data = synth_utterances(&cfg.synth, 7, 8, 12, 1, Split::Train).unwrap();
    let mut t = Trainer::new(&cfg, Model::new(&cfg.model, 3).unwrap(), 0, None).unwrap();
    while t.step < min_steps {
        t.run(&data, |_, _| Ok(())).unwrap();
        t.cfg.train.epochs += 2;
    }
    let model = &t.model;
    let enc = &model.encoder;
    let bytes = encode_checkpoint(&cfg, t.step, &model.store).unwrap();
    let ck = decode_checkpoint(&bytes, std::path::Path::new("mem")).unwrap();
    let shared_identical = (0..2).all(|c| {
        let shared = enc.shared_entries(c);
        let per_group: Vec<Vec<u8>> = (0..3)
            .map(|g| {
                enc.block_entries(g, c)
                    .into_iter()
                    .filter(|id| shared.contains(id))
                    .flat_map(|id| ck.model.store.get(id).data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect::<Vec<u8>>())
                    .collect()
            })
            .collect();
        !per_group[0].is_empty() && per_group.windows(2).all(|w| w[0] == w[1])
    });
    let norms_differ = (0..2).any(|c| {
        (1..3).any(|g| {
            enc.adapters[g][c].norm_ids().iter().zip(enc.adapters[0][c].norm_ids()).any(|(a, b)| model.store.get(*a) != model.store.get(b))
        })
    });
    let single_copy = model.store.entries().iter().all(|e| !e.name.contains("groups.1.blocks.0.ffn1"));
    SharingAfterTraining { steps: t.step, shared_identical, norms_differ, single_copy }
}

/// Row count of the shared model's distance profile, whether it repeats
/// exactly, and its largest gap to the unrolled copy's profile.
pub fn profile_checks() -> (usize, bool, f64) {
    let (store, enc) = shared_model();
    let (copy, unrolled, _) = unroll(&store, &enc);
    let x = features(24, 8, 6);
    let a = l2_distance_profile(&store, &enc, &x).unwrap();
    let b = l2_distance_profile(&copy, &unrolled, &x).unwrap();
    let repeatable = a == l2_distance_profile(&store, &enc, &x).unwrap();
    let aligned = a.len() == b.len() && a.iter().zip(&b).all(|(r, s)| r.transformation == s.transformation && r.index == s.index);
    let gap = if aligned { a.iter().zip(&b).map(|(r, s)| (r.distance - s.distance).abs()).fold(0.0, f64::max) } else { f64::INFINITY };
    (a.len(), repeatable, gap)
}

/// A tiny model whose output layer is scaled up so that next-token
/// distributions are far from uniform.
pub fn sharp_model(vocab: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        encoder: encoder_config(1, 2, 2, 8),
        decoder: DecoderConfig { layers: 1, dim: 8, heads: 2, ffn_dim: 12, vocab, dropout: 0.0 },
    };
    let mut m = Model::new(&cfg, seed).unwrap();
    let w = m.decoder.out_weight;
    let scaled = m.store.get(w).map(|v| 6.0 * v);
    m.store.set(w, scaled).unwrap();
    m
}

/// Length-normalized log-probability of `tokens` followed by `<eos>`, from
/// one teacher-forced decoder pass.
fn finished_score(model: &Model, memory: &Tensor, tokens: &[usize]) -> f64 {
    let prefix: Vec<usize> = std::iter::once(SOS).chain(tokens.iter().copied()).collect();
    let targets: Vec<usize> = tokens.iter().copied().chain(std::iter::once(EOS)).collect();
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &model.store);
    let mem = ctx.constant(memory.clone());
    let (logits, _) = decoder_forward(&ctx, &model.decoder, &[prefix], mem, &Layout::single(memory.shape()[0])).unwrap();
    let lp = logits.log_softmax().unwrap().value();
    targets.iter().enumerate().map(|(s, &t)| lp.row(s)[t]).sum::<f64>() / targets.len() as f64
}

/// Best `<eos>`-terminated sequence of at most `max_len` ids, by
/// enumeration.
pub fn exhaustive_best(model: &Model, memory: &Tensor, max_len: usize) -> (Vec<usize>, f64) {
    let vocab = model.decoder.config.vocab;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![Vec::new()];
    while let Some(tokens) = stack.pop() {
        let score = finished_score(model, memory, &tokens);
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((tokens.clone(), score));
        }
        if tokens.len() + 1 < max_len {
            for id in FIRST_TOKEN..vocab {
                let mut next = tokens.clone();
                next.push(id);
                stack.push(next);
            }
        }
    }
    best.unwrap()
}

/// Compares a full-width beam with enumeration (V=4, max_len=3) and the
/// unit beam with greedy decoding over a few random models. Returns the
/// number of cases checked and a description of the first mismatch.
pub fn beam_oracle() -> (usize, Option<String>) {
    let mut cases = 0;
    for seed in 0..4 {
        let m = sharp_model(4, seed);
        let x = features(14, 8, seed + 10);
        let hyp = beam_search(&m, &x, 4usize.pow(3), 3).unwrap();
        let (tokens, score) = exhaustive_best(&m, &m.encode(&x).unwrap(), 3);
        cases += 1;
        if !hyp.finished || hyp.tokens != tokens || (hyp.score() - score).abs() > 1e-9 {
            return (cases, Some(format!("seed {seed}: beam {:?} vs enumeration {tokens:?}", hyp.tokens)));
        }
        for max_len in [1, 3, 5] {
            cases += 1;
            if beam_search(&m, &x, 1, max_len).unwrap() != greedy_search(&m, &x, max_len).unwrap() {
                return (cases, Some(format!("seed {seed}: beam 1 differs from greedy at max_len {max_len}")));
            }
        }
    }
    (cases, None)
}
