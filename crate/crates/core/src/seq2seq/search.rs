use std::cmp::Ordering;

use super::{decoder_forward, Model, EOS, FIRST_TOKEN, SOS};
use crate::error::{Error, Result};
use crate::nn::Layout;
use crate::tensor::{Ctx, Tape, Tensor};

/// A decoded sequence. `tokens` holds regular ids only; `finished` says
/// whether `<eos>` was emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub finished: bool,
    /// Total log-probability of the emitted ids (including `<eos>`).
    pub log_prob: f64,
}

impl Hypothesis {
    /// Number of emitted ids, `<eos>` included.
    pub fn len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.log_prob / self.len() as f64
        }
    }
}

/// Log-probabilities of the next id after `prefix` (which starts with `<sos>`).
fn next_log_probs(model: &Model, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &model.store);
    let mem_layout = Layout::single(memory.shape()[0]);
    let (logits, _) = decoder_forward(&ctx, &model.decoder, &[prefix.to_vec()], ctx.constant(memory.clone()), &mem_layout)?;
    let lp = logits.log_softmax()?.value();
    Ok(lp.row(prefix.len() - 1).to_vec())
}

/// Ids a hypothesis may emit: `<eos>` and the regular tokens.
fn candidates(vocab: usize) -> impl Iterator<Item = usize> {
    std::iter::once(EOS).chain(FIRST_TOKEN..vocab)
}

fn by_score_desc(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().partial_cmp(&a.score()).unwrap_or(Ordering::Equal)
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < 1 {
        return Err(Error::Argument("max_len must be >= 1".into()));
    }
    Ok(())
}

/// Beam search over at most `max_len` emitted ids (counting `<eos>`).
///
/// Each step extends every live hypothesis by every candidate id and keeps
/// the `beam` best by score; extensions ending in `<eos>` are finalized.
/// Returns the best finalized hypothesis, or the best unfinished one when
/// none finished within `max_len`. Ties keep the earlier candidate (lower
/// id, earlier hypothesis).
///
/// The greedy hypothesis also takes part in the final selection. Pruning
/// by prefix score can otherwise drop the greedy path and return something
/// worse than `beam = 1` would.
pub fn beam_search(model: &Model, features: &Tensor, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::Argument("beam must be >= 1".into()));
    }
    check_max_len(max_len)?;
    let memory = model.encode(features)?;
    let vocab = model.decoder.config.vocab;
    let greedy = greedy_from(model, &memory, max_len)?;
    let mut live = vec![Hypothesis { tokens: Vec::new(), finished: false, log_prob: 0.0 }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut expanded = Vec::new();
        for hyp in &live {
            let prefix: Vec<usize> = std::iter::once(SOS).chain(hyp.tokens.iter().copied()).collect();
            let lp = next_log_probs(model, &memory, &prefix)?;
            for id in candidates(vocab) {
                let mut next = hyp.clone();
                next.log_prob += lp[id];
                if id == EOS {
                    next.finished = true;
                } else {
                    next.tokens.push(id);
                }
                expanded.push(next);
            }
        }
        expanded.sort_by(by_score_desc);
        expanded.truncate(beam);
        live.clear();
        for h in expanded {
            if h.finished {
                done.push(h);
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    if greedy.finished {
        done.push(greedy);
    } else {
        live.push(greedy);
    }
    let pool = if done.is_empty() { &mut live } else { &mut done };
    pool.sort_by(by_score_desc);
    Ok(pool.swap_remove(0))
}

/// Repeatedly emits the most likely id (lowest id on ties).
pub fn greedy_search(model: &Model, features: &Tensor, max_len: usize) -> Result<Hypothesis> {
    check_max_len(max_len)?;
    greedy_from(model, &model.encode(features)?, max_len)
}

fn greedy_from(model: &Model, memory: &Tensor, max_len: usize) -> Result<Hypothesis> {
    let vocab = model.decoder.config.vocab;
    let mut hyp = Hypothesis { tokens: Vec::new(), finished: false, log_prob: 0.0 };
    for _ in 0..max_len {
        let prefix: Vec<usize> = std::iter::once(SOS).chain(hyp.tokens.iter().copied()).collect();
        let lp = next_log_probs(model, memory, &prefix)?;
        let mut best = EOS;
        for id in candidates(vocab) {
            if lp[id] > lp[best] {
                best = id;
            }
        }
        hyp.log_prob += lp[best];
        if best == EOS {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(best);
    }
    Ok(hyp)
}
