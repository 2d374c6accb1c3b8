//! Experiment plumbing: config files, the synthetic dataset, checkpoints,
//! the optimizer, training, evaluation and the command line.

mod checkpoint;
pub mod cli;
mod config;
mod data;
mod eval;
mod optim;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, FORMAT_VERSION,
};
pub use config::{EvalConfig, ExperimentConfig, OptimConfig, SyntheticSpec, TrainConfig};
pub use data::{dataset_files, read_dataset, synth_utterances, write_dataset, Split, FEATS_FILE, TEXT_FILE};
pub use eval::{edit_distance, evaluate, EvalReport};
pub use optim::{lr_schedule, Adam};
pub use train::{
    check_teacher, distill, epoch_batches, eval_kd, load_teacher, metrics_header, teacher_hidden, train, MetricsRow,
    TrainOutcome, Trainer, FINAL_CHECKPOINT, METRICS_FILE,
};
