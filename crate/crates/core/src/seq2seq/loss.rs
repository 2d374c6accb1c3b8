use crate::error::{Error, Result};
use crate::nn::Layout;
use crate::tensor::{Ctx, Tensor, Var};

/// Weights of the auxiliary terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Balance-loss weight.
    pub alpha: f64,
    /// Distillation weight.
    pub beta: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Per-row weights that average within each sequence, then over sequences.
fn sequence_mean_weights(layout: &Layout) -> Result<Vec<f64>> {
    let used = layout.lengths.iter().filter(|&&l| l > 0).count();
    if used == 0 {
        return Err(Error::Usage("loss over a batch without valid positions".into()));
    }
    Ok((0..layout.rows())
        .map(|r| {
            let len = layout.lengths[r / layout.time];
            if layout.is_valid(r) {
                1.0 / (len as f64 * used as f64)
            } else {
                0.0
            }
        })
        .collect())
}

/// Negative log-likelihood of `targets[b][s]` at row `b·S + s` of `logits`,
/// averaged over each sequence's positions, then over the batch.
pub fn nll_loss<'t>(ctx: &Ctx<'t>, logits: Var<'t>, targets: &[Vec<usize>], layout: &Layout) -> Result<Var<'t>> {
    let shape = logits.shape();
    let (rows, vocab) = (shape[0], shape[1]);
    if rows != layout.rows() || targets.len() != layout.batch {
        return Err(Error::Shape(format!("nll: {rows} logit rows for layout {:?}", layout)));
    }
    for (b, t) in targets.iter().enumerate() {
        if t.len() != layout.lengths[b] {
            return Err(Error::Shape(format!("nll: {} targets for {} positions", t.len(), layout.lengths[b])));
        }
        if let Some(&bad) = t.iter().find(|&&id| id >= vocab) {
            return Err(Error::Argument(format!("target id {bad} outside vocabulary of {vocab}")));
        }
    }
    let weights = sequence_mean_weights(layout)?;
    let idx: Vec<usize> = (0..rows)
        .map(|r| {
            let (b, s) = (r / layout.time, r % layout.time);
            r * vocab + if layout.is_valid(r) { targets[b][s] } else { 0 }
        })
        .collect();
    let picked = logits.log_softmax()?.gather(idx, [rows])?;
    picked.mul(&ctx.constant(Tensor::new([rows], weights)?))?.sum()?.scale(-1.0)
}

/// Mean over valid frames of `‖h_t − h'_t‖₂` (per sequence, then over the
/// batch). The teacher side is expected to be a constant.
pub fn kd_loss<'t>(ctx: &Ctx<'t>, h: Var<'t>, h_teacher: Var<'t>, layout: &Layout) -> Result<Var<'t>> {
    if h.shape() != h_teacher.shape() {
        return Err(Error::Shape(format!(
            "distillation needs equal encoder output shapes, got {:?} and {:?}",
            h.shape(),
            h_teacher.shape()
        )));
    }
    if h.shape()[0] != layout.rows() {
        return Err(Error::Shape(format!("kd: {} rows for layout {:?}", h.shape()[0], layout)));
    }
    let weights = ctx.constant(Tensor::new([layout.rows()], sequence_mean_weights(layout)?)?);
    h.sub(&h_teacher)?.row_norms()?.mul(&weights)?.sum()
}

/// `nll + α·mean(balance) + β·kd`. An empty balance list or a missing kd
/// term contributes nothing.
pub fn total_loss<'t>(nll: Var<'t>, balances: &[Var<'t>], kd: Option<Var<'t>>, w: LossWeights) -> Result<Var<'t>> {
    let mut total = nll;
    if let Some((first, rest)) = balances.split_first() {
        let mut sum = *first;
        for b in rest {
            sum = sum.add(b)?;
        }
        total = total.add(&sum.scale(w.alpha / balances.len() as f64)?)?;
    }
    if let Some(kd) = kd {
        total = total.add(&kd.scale(w.beta)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Rng, Stream, Tape};

    fn scalar(v: Var<'_>) -> f64 {
        v.value().data()[0]
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let layout = Layout::new(3, vec![3, 2]);
        let logits = ctx.constant(Tensor::zeros([6, 7]));
        let loss = nll_loss(&ctx, logits, &[vec![3, 4, 2], vec![5, 2]], &layout).unwrap();
        assert!((scalar(loss) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let mut l = Tensor::zeros([2, 4]);
        l.data_mut()[3] = 40.0;
        l.data_mut()[4 + 2] = 40.0;
        let loss = nll_loss(&ctx, ctx.constant(l), &[vec![3, 2]], &Layout::single(2)).unwrap();
        assert!(scalar(loss) < 1e-12);
    }

    #[test]
    fn hand_computed_cross_entropy() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let rows = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]];
        let targets = [1usize, 2];
        let expect: f64 = rows
            .iter()
            .zip(targets)
            .map(|(r, t)| {
                let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
                -(r[t].exp() / z).ln()
            })
            .sum::<f64>()
            / 2.0;
        let logits = ctx.constant(Tensor::from_rows(&rows.map(|r| r.to_vec())).unwrap());
        let loss = nll_loss(&ctx, logits, &[targets.to_vec()], &Layout::single(2)).unwrap();
        assert!((scalar(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn batch_average_is_per_sequence() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let mut rng = Rng::new(1).fork(Stream::Test, 0);
        let logits = rng.uniform_tensor([6, 4], 2.0);
        let layout = Layout::new(3, vec![3, 1]);
        let targets = vec![vec![1, 2, 3], vec![0]];
        let batch = scalar(nll_loss(&ctx, ctx.constant(logits.clone()), &targets, &layout).unwrap());
        let one = |rows: Vec<usize>, t: Vec<usize>| {
            let sub: Vec<Vec<f64>> = rows.iter().map(|&r| logits.row(r).to_vec()).collect();
            let n = sub.len();
            scalar(nll_loss(&ctx, ctx.constant(Tensor::from_rows(&sub).unwrap()), &[t], &Layout::single(n)).unwrap())
        };
        let expect = (one(vec![0, 1, 2], vec![1, 2, 3]) + one(vec![3], vec![0])) / 2.0;
        assert!((batch - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_targets_are_a_usage_error() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let err = nll_loss(&ctx, ctx.constant(Tensor::zeros([2, 3])), &[vec![]], &Layout::new(2, vec![0]));
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn kd_examples() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let mut rng = Rng::new(2).fork(Stream::Test, 0);
        let h = rng.uniform_tensor([3, 4], 1.0);
        let layout = Layout::single(3);
        let same = kd_loss(&ctx, ctx.constant(h.clone()), ctx.constant(h.clone()), &layout).unwrap();
        assert_eq!(scalar(same), 0.0);

        let mut shifted = h.clone();
        for r in 0..3 {
            shifted.data_mut()[r * 4 + r] += 1.0;
        }
        let unit = kd_loss(&ctx, ctx.constant(shifted), ctx.constant(h.clone()), &layout).unwrap();
        assert!((scalar(unit) - 1.0).abs() < 1e-12);

        let other = rng.uniform_tensor([3, 4], 1.0);
        let direct: f64 = (0..3)
            .map(|r| h.row(r).iter().zip(other.row(r)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 3.0;
        let got = kd_loss(&ctx, ctx.constant(h), ctx.constant(other), &layout).unwrap();
        assert!((scalar(got) - direct).abs() < 1e-6);

        let bad = kd_loss(&ctx, ctx.constant(Tensor::zeros([3, 4])), ctx.constant(Tensor::zeros([3, 5])), &layout);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn kd_gradient_at_equal_outputs_is_zero() {
        let tape = Tape::new();
        let store = ParamStore::new();
        let ctx = Ctx::eval(&tape, &store);
        let h = tape.param(Tensor::filled([2, 3], 0.5));
        let loss = kd_loss(&ctx, h, ctx.constant(Tensor::filled([2, 3], 0.5)), &Layout::single(2)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(h).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new();
        let c = |v: f64| tape.param(Tensor::scalar(v));
        let w = LossWeights { alpha: 0.01, beta: 0.005 };
        let total = total_loss(c(2.0), &[c(1.0), c(1.2)], Some(c(0.5)), w).unwrap();
        assert!((scalar(total) - 2.0135).abs() < 1e-12);

        let zero = LossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(scalar(total_loss(c(2.7), &[c(1.3)], Some(c(0.4)), zero).unwrap()), 2.7);

        let floor = total_loss(c(0.0), &[c(1.0), c(1.0), c(1.0)], None, w).unwrap();
        assert!((scalar(floor) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn total_loss_is_linear_in_each_weight() {
        let tape = Tape::new();
        let c = |v: f64| tape.param(Tensor::scalar(v));
        let at = |alpha, beta| scalar(total_loss(c(1.5), &[c(1.1), c(1.7)], Some(c(0.3)), LossWeights { alpha, beta }).unwrap());
        let base = at(0.0, 0.0);
        assert!((at(1.0, 0.0) - base - 1.4).abs() < 1e-12);
        assert!((at(0.0, 1.0) - base - 0.3).abs() < 1e-12);
        assert!((at(2.0, 3.0) - base - (2.0 * 1.4 + 3.0 * 0.3)).abs() < 1e-12);
    }
}
