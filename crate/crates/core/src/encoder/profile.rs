use super::{encoder_forward, Encoder};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamStore, Tape, Tensor};

/// One line of the per-transformation distance profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub index: usize,
    pub group: usize,
    pub block: usize,
    pub transformation: &'static str,
    pub distance: f64,
}

/// Eval-mode distance between input and output of every residual branch of
/// every block application, in execution order (`4·C·G` rows).
pub fn l2_distance_profile(store: &ParamStore, enc: &Encoder, features: &Tensor) -> Result<Vec<ProfileRow>> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, store);
    let out = encoder_forward(&ctx, enc, std::slice::from_ref(features), true)?;
    let trace = out.trace.ok_or_else(|| Error::Usage("encoder trace was not recorded".into()))?;
    Ok(trace
        .into_iter()
        .enumerate()
        .map(|(index, e)| ProfileRow {
            index,
            group: e.group,
            block: e.block,
            transformation: e.label,
            distance: e.distance,
        })
        .collect())
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("index,group,block,transformation,distance\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.9e}\n", r.index, r.group, r.block, r.transformation, r.distance));
    }
    out
}
