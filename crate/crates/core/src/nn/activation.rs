use crate::error::{Error, Result};
use crate::tensor::{Ctx, Mode, Rng, Tensor, Var};

pub fn swish<'t>(x: Var<'t>) -> Result<Var<'t>> {
    x.swish()
}

/// Splits the last axis into halves `[a | b]` and returns `a·sigmoid(b)`.
pub fn glu<'t>(x: Var<'t>) -> Result<Var<'t>> {
    x.glu()
}

/// Inverted dropout. Eval mode and `rate == 0` return `x` itself.
pub fn dropout<'t>(x: Var<'t>, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = x.shape();
    let mut mask = Tensor::zeros(shape);
    for m in mask.data_mut() {
        *m = if rng.uniform() < rate { 0.0 } else { keep };
    }
    x.mul(&x.tape().constant(mask))
}

impl<'t> Ctx<'t> {
    pub fn dropout(&self, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        let mode = self.mode();
        self.with_dropout_rng(|rng| dropout(x, rate, mode, rng))
    }
}
