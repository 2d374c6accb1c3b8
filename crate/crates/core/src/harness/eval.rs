use std::fmt::Write as _;
use std::thread;

use crate::error::{Error, Result};
use crate::seq2seq::{beam_search, Hypothesis, Model, Utterance};

/// Token-level edit distance.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    strsim::generic_levenshtein(&reference.to_vec(), &hypothesis.to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Summed edit distance divided by the total reference length.
    pub ter: f64,
    pub errors: usize,
    pub ref_tokens: usize,
    /// Decoded hypotheses in utterance-id order.
    pub hyps: Vec<(String, Hypothesis)>,
}

impl EvalReport {
    /// One line per utterance: id, tab, space-separated ids, tab, score.
    pub fn hyp_lines(&self) -> String {
        let mut s = String::new();
        for (id, h) in &self.hyps {
            let toks: Vec<String> = h.tokens.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{id}\t{}\t{:.6}", toks.join(" "), h.score());
        }
        s
    }
}

/// Corpus token error rate over `utts`, decoded with beam search.
///
/// Utterances are split across worker threads; results are merged in id
/// order, so the report does not depend on input order.
pub fn evaluate(model: &Model, utts: &[Utterance], beam: usize, max_len: usize) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut order: Vec<&Utterance> = utts.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Usage(format!("duplicate utterance id {}", w[0].id)));
    }
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(order.len());
    let chunk = order.len().div_ceil(workers);
    let decoded: Vec<Result<Vec<Hypothesis>>> = thread::scope(|s| {
        let handles: Vec<_> = order
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|u| beam_search(model, &u.features, beam, max_len)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decoder thread panicked")).collect()
    });
    let mut hyps = Vec::with_capacity(order.len());
    for part in decoded {
        hyps.extend(part?);
    }
    let errors: usize = order.iter().zip(&hyps).map(|(u, h)| edit_distance(&u.tokens, &h.tokens)).sum();
    let ref_tokens: usize = order.iter().map(|u| u.tokens.len()).sum();
    if ref_tokens == 0 {
        return Err(Error::Usage("references contain no tokens".into()));
    }
    Ok(EvalReport {
        ter: errors as f64 / ref_tokens as f64,
        errors,
        ref_tokens,
        hyps: order.iter().map(|u| u.id.clone()).zip(hyps).collect(),
    })
}
