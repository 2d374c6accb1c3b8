use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamGrads, ParamKind, ParamStore, Tensor};

/// Inverse-square-root schedule with linear warmup:
/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: usize, warmup: usize, scale: f64, d: usize) -> Result<f64> {
    if step < 1 {
        return Err(Error::Argument(format!("learning-rate step must be >= 1, got {step}")));
    }
    if warmup < 1 {
        return Err(Error::Argument("warmup must be >= 1".into()));
    }
    let s = step as f64;
    Ok(scale * (d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

/// Adam with per-tensor bias correction. Tensors that received no gradient
/// in a step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        Adam { cfg: cfg.clone(), state: vec![Moments::default(); store.len()] }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        let OptimConfig { beta1, beta2, eps, .. } = self.cfg;
        for (id, grad) in grads.iter() {
            let Some(g) = grad else { continue };
            if store.entry(id).kind != ParamKind::Weight {
                continue;
            }
            let st = &mut self.state[id.index()];
            if st.m.is_empty() {
                st.m = vec![0.0; g.numel()];
                st.v = vec![0.0; g.numel()];
            }
            st.steps += 1;
            let c1 = 1.0 - beta1.powi(st.steps);
            let c2 = 1.0 - beta2.powi(st.steps);
            let value: &mut Tensor = store.get_mut(id);
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "adam update" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let lr1 = lr_schedule(1, 4000, 1.0, 256).unwrap();
        assert!((lr1 - 2.4705e-7).abs() < 1e-10, "{lr1}");
        assert!((lr1 - (1.0 / 16.0) * 4000f64.powf(-1.5)).abs() < 1e-20);
        let w = 400;
        let at = lr_schedule(w, w, 1.0, 64).unwrap();
        let rising = (w as f64) * (w as f64).powf(-1.5) / 8.0;
        let falling = (w as f64).powf(-0.5) / 8.0;
        assert!((at - rising).abs() < 1e-15 && (at - falling).abs() < 1e-15);
        let ratio = lr_schedule(2 * w, w, 1.0, 64).unwrap() / at;
        assert!((ratio - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(matches!(lr_schedule(0, w, 1.0, 64), Err(Error::Argument(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), ParamKind::Weight);
        let skipped = store.add("u", Tensor::new([1], vec![5.0]).unwrap(), ParamKind::Weight);
        let cfg = OptimConfig { lr_scale: 1.0, warmup: 1, beta1: 0.9, beta2: 0.98, eps: 1e-9 };
        let mut adam = Adam::new(&cfg, &store);
        let tape = crate::tensor::Tape::new();
        let ctx = crate::tensor::Ctx::eval(&tape, &store);
        let w = ctx.param(id);
        let loss = w.mul(&ctx.constant(Tensor::new([3], vec![2.0, -3.0, 0.5]).unwrap())).unwrap().sum().unwrap();
        let grads = ctx.param_grads(&tape.backward(loss).unwrap());
        drop(ctx);
        adam.step(&mut store, &grads, 0.1).unwrap();
        let got = store.get(id).data().to_vec();
        for (g, want) in got.iter().zip([0.9, 2.1, 2.9]) {
            assert!((g - want).abs() < 1e-7, "{got:?}");
        }
        assert_eq!(store.get(skipped).data(), &[5.0]);
    }
}
