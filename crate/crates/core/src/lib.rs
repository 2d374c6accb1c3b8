pub mod encoder;
pub mod error;
pub mod harness;
pub mod moe;
pub mod nn;
pub mod seq2seq;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/conformer.md")]
    mod conformer {}
    #[doc = include_str!("../../../book/src/experts.md")]
    mod experts {}
    #[doc = include_str!("../../../book/src/sharing.md")]
    mod sharing {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
}
