//! Conformer sublayers.
//!
//! Sequences travel through the layers as one `[batch·time × dim]` matrix
//! plus a [`Layout`] that says which rows are real frames. Row-wise layers
//! ignore the layout; attention, convolution and batch norm consult it so
//! padded frames never influence valid ones.

mod activation;
mod attention;
mod conv;
mod ffn;
mod frontend;
mod init;
mod norm;

pub use activation::{dropout, glu, swish};
pub use attention::{
    absolute_positions, attention, attention_weights, relative_positions, rel_mhsa, MhsaParams,
    RelPosParams,
};
pub use conv::{conv_module, ConvModuleParams};
pub use ffn::{ffn_forward, FfnParams};
pub use frontend::{subsample_frontend, subsample_frontend_batch, subsampled_len, FrontendParams};
pub use init::ParamBuilder;
pub use norm::{batch_norm, layer_norm, BatchNormParams, NormParams};

/// Padding layout of a batch flattened to `[batch·time × dim]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub time: usize,
    pub lengths: Vec<usize>,
}

impl Layout {
    pub fn new(time: usize, lengths: Vec<usize>) -> Self {
        debug_assert!(lengths.iter().all(|&l| l <= time));
        Layout { batch: lengths.len(), time, lengths }
    }

    /// One unpadded sequence of `time` frames.
    pub fn single(time: usize) -> Self {
        Layout::new(time, vec![time])
    }

    pub fn rows(&self) -> usize {
        self.batch * self.time
    }

    pub fn is_valid(&self, row: usize) -> bool {
        row % self.time < self.lengths[row / self.time]
    }

    /// `true` for every real (non-padded) row.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.rows()).map(|r| self.is_valid(r)).collect()
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.rows()).filter(|&r| self.is_valid(r)).collect()
    }
}
