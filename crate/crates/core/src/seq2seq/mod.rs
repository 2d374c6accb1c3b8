//! Attention encoder-decoder: transformer decoder, training losses and
//! beam-search decoding.

mod decoder;
mod loss;
mod search;

pub use decoder::{decoder_forward, Decoder, DecoderConfig, DecoderLayer, EOS, FIRST_TOKEN, PAD, SOS};
pub use loss::{kd_loss, nll_loss, total_loss, LossWeights};
pub use search::{beam_search, greedy_search, Hypothesis};

use crate::encoder::{encoder_forward, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::moe::{balance_loss_var, pooled_stats, RouterStats};
use crate::nn::ParamBuilder;
use crate::tensor::{Ctx, ParamStore, Rng, Stream, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.dim != self.decoder.dim {
            return Err(Error::Config(format!(
                "encoder dim {} and decoder dim {} differ",
                self.encoder.dim, self.decoder.dim
            )));
        }
        Ok(())
    }
}

/// Parameters and their layout for a whole encoder-decoder.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).fork(Stream::Init, 0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let encoder = Encoder::build(&config.encoder, &mut b.scope("encoder"))?;
        let decoder = Decoder::build(&config.decoder, &mut b.scope("decoder"))?;
        Ok(Model { config: config.clone(), store, encoder, decoder })
    }

    /// Eval-mode encoder output of one utterance, `[T' × dim]`.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let tape = crate::tensor::Tape::new();
        let ctx = Ctx::eval(&tape, &self.store);
        let out = encoder_forward(&ctx, &self.encoder, std::slice::from_ref(features), false)?;
        Ok((*out.hidden.value()).clone())
    }
}

/// One training or test example. `tokens` holds regular ids only.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

impl Utterance {
    /// Decoder input: `<sos> y₁ … y_S`.
    pub fn prefix(&self) -> Vec<usize> {
        std::iter::once(SOS).chain(self.tokens.iter().copied()).collect()
    }

    /// Decoder target: `y₁ … y_S <eos>`.
    pub fn target(&self) -> Vec<usize> {
        self.tokens.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

/// Losses of one forward pass.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub nll: f64,
    /// `α·mean(balance)`.
    pub balance_term: f64,
    /// `β·kd`, zero without a teacher or with `β = 0`.
    pub kd_term: f64,
    /// Router statistics per block position, pooled over groups.
    pub stats: Vec<RouterStats>,
    pub hidden: Var<'t>,
}

/// Runs encoder and decoder on a batch and assembles the total loss.
/// `teacher_hidden` is the frozen teacher's encoder output for the same
/// batch, laid out like the student's.
pub fn model_loss<'t>(
    ctx: &Ctx<'t>,
    model: &Model,
    batch: &[&Utterance],
    weights: LossWeights,
    teacher_hidden: Option<&Tensor>,
) -> Result<LossParts<'t>> {
    let feats: Vec<Tensor> = batch.iter().map(|u| u.features.clone()).collect();
    let enc = encoder_forward(ctx, &model.encoder, &feats, false)?;
    let prefixes: Vec<Vec<usize>> = batch.iter().map(|u| u.prefix()).collect();
    let targets: Vec<Vec<usize>> = batch.iter().map(|u| u.target()).collect();
    let (logits, dec_layout) = decoder_forward(ctx, &model.decoder, &prefixes, enc.hidden, &enc.layout)?;
    let nll = nll_loss(ctx, logits, &targets, &dec_layout)?;

    let mut balances = Vec::with_capacity(enc.records.len());
    let mut stats = Vec::with_capacity(enc.records.len());
    for records in &enc.records {
        let refs: Vec<_> = records.iter().collect();
        balances.push(balance_loss_var(ctx, &refs)?);
        stats.push(pooled_stats(records)?);
    }
    let kd = match teacher_hidden {
        Some(t) if weights.beta > 0.0 => Some(kd_loss(ctx, enc.hidden, ctx.constant(t.clone()), &enc.layout)?),
        _ => None,
    };
    let total = total_loss(nll, &balances, kd, weights)?;

    let value = |v: &Var<'_>| v.value().data()[0];
    let balance_term = if balances.is_empty() {
        0.0
    } else {
        weights.alpha * balances.iter().map(value).sum::<f64>() / balances.len() as f64
    };
    Ok(LossParts {
        total,
        nll: value(&nll),
        balance_term,
        kd_term: kd.map_or(0.0, |k| weights.beta * value(&k)),
        stats,
        hidden: enc.hidden,
    })
}
