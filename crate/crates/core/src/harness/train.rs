//! Training and distillation loops.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::ExperimentConfig;
use super::data::read_dataset;
use super::optim::{lr_schedule, Adam};
use crate::encoder::encoder_forward;
use crate::error::{Error, Result};
use crate::seq2seq::{model_loss, Model, Utterance};
use crate::tensor::{Ctx, Mode, Rng, Stream, Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One row of the metrics log. `balance` and `kd` are the weighted terms
/// as they enter the total (`α·mean balance`, `β·kd`).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub nll: f64,
    pub balance: f64,
    pub kd: f64,
    pub total: f64,
    /// Expert selection frequency per block position, pooled over groups.
    pub freq: Vec<Vec<f64>>,
}

/// Column names of the metrics log for a given config. Expert frequency
/// columns exist only for MoE encoders.
pub fn metrics_header(cfg: &ExperimentConfig) -> String {
    let mut h = String::from("step,epoch,lr,nll,balance,kd,total");
    let e = &cfg.model.encoder;
    if e.is_moe() {
        for c in 0..e.blocks {
            for x in 0..e.experts {
                let _ = write!(h, ",freq_b{c}_e{x}");
            }
        }
    }
    h
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.epoch, self.lr, self.nll, self.balance, self.kd, self.total
        );
        for f in self.freq.iter().flatten() {
            let _ = write!(s, ",{f}");
        }
        s
    }
}

/// Batches of utterance indices for one epoch: utterances sorted by frame
/// count (ties by id) are cut into consecutive buckets of `batch_size`, and
/// the bucket order is shuffled with the epoch's data-order stream.
pub fn epoch_batches(utts: &[Utterance], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by(|&a, &b| {
        (utts[a].features.shape()[0], &utts[a].id).cmp(&(utts[b].features.shape()[0], &utts[b].id))
    });
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    Rng::new(seed).fork(Stream::DataOrder, epoch as u64).shuffle(&mut batches);
    batches
}

/// Frozen teacher encoder output for a batch, laid out like the student's.
pub fn teacher_hidden(teacher: &Model, batch: &[&Utterance]) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, &teacher.store);
    let feats: Vec<Tensor> = batch.iter().map(|u| u.features.clone()).collect();
    let out = encoder_forward(&ctx, &teacher.encoder, &feats, false)?;
    Ok((*out.hidden.value()).clone())
}

fn check_finite(value: f64, term: &'static str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: term })
    }
}

/// Model, optimizer and step counter of a run in progress.
pub struct Trainer<'a> {
    pub cfg: ExperimentConfig,
    pub model: Model,
    pub step: u64,
    adam: Adam,
    teacher: Option<&'a Model>,
}

impl<'a> Trainer<'a> {
    /// `step` is the number of optimizer steps already taken.
    pub fn new(cfg: &ExperimentConfig, model: Model, step: u64, teacher: Option<&'a Model>) -> Result<Self> {
        if let Some(t) = teacher {
            check_teacher(&t.config.encoder, &cfg.model.encoder)?;
        }
        let adam = Adam::new(&cfg.optim, &model.store);
        Ok(Trainer { cfg: cfg.clone(), model, step, adam, teacher })
    }

    /// One optimizer step on `batch`; returns its metrics row.
    pub fn train_step(&mut self, batch: &[&Utterance], epoch: usize) -> Result<MetricsRow> {
        let step = self.step + 1;
        let lr = lr_schedule(step as usize, self.cfg.optim.warmup, self.cfg.optim.lr_scale, self.cfg.model.encoder.dim)?;
        let weights = self.cfg.loss;
        let target = match self.teacher {
            Some(t) if weights.beta > 0.0 => Some(teacher_hidden(t, batch)?),
            _ => None,
        };
        let root = Rng::new(self.cfg.train.seed).fork(Stream::Dropout, step);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.model.store, Mode::Train, &root);
        let parts = model_loss(&ctx, &self.model, batch, weights, target.as_ref())?;
        let total = parts.total.value().data()[0];
        check_finite(parts.nll, "nll loss")?;
        check_finite(parts.balance_term, "balance loss")?;
        check_finite(parts.kd_term, "kd loss")?;
        check_finite(total, "total loss")?;
        let grads = ctx.param_grads(&tape.backward(parts.total)?);
        let updates = ctx.take_updates();
        let row = MetricsRow {
            step,
            epoch,
            lr,
            nll: parts.nll,
            balance: parts.balance_term,
            kd: parts.kd_term,
            total,
            freq: parts.stats.iter().map(|s| s.freq.clone()).collect(),
        };
        drop(ctx);
        self.model.store.apply_updates(updates);
        self.adam.step(&mut self.model.store, &grads, lr)?;
        self.step = step;
        Ok(row)
    }

    /// Trains on `data` until `train.epochs` epochs or `train.max_steps`
    /// total steps. A resumed trainer skips the batches its earlier steps
    /// consumed, so data order continues where it stopped.
    ///
    /// `on_step` sees every row and the trainer after the update; it is
    /// where logging and periodic checkpoints happen.
    pub fn run(
        &mut self,
        data: &[Utterance],
        mut on_step: impl FnMut(&MetricsRow, &Trainer<'_>) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let t = &self.cfg.train;
        let (seed, epochs, batch_size, max_steps) = (t.seed, t.epochs, t.batch_size, t.max_steps as u64);
        let mut rows = Vec::new();
        let mut consumed = 0u64;
        for epoch in 0..epochs {
            for batch in epoch_batches(data, batch_size, seed, epoch) {
                if max_steps > 0 && self.step >= max_steps {
                    return Ok(rows);
                }
                consumed += 1;
                if consumed <= self.step {
                    continue;
                }
                let refs: Vec<&Utterance> = batch.iter().map(|&i| &data[i]).collect();
                let row = self.train_step(&refs, epoch)?;
                on_step(&row, self)?;
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

/// The teacher's frontend and width must match the student's so that the
/// encoder outputs line up frame by frame.
pub fn check_teacher(teacher: &crate::encoder::EncoderConfig, student: &crate::encoder::EncoderConfig) -> Result<()> {
    let pairs = [
        ("encoder.dim", teacher.dim, student.dim),
        ("encoder.feature_dim", teacher.feature_dim, student.feature_dim),
        ("encoder.frontend_channels", teacher.frontend_channels, student.frontend_channels),
    ];
    for (key, t, s) in pairs {
        if t != s {
            return Err(Error::Config(format!("teacher {key} = {t} but student {key} = {s}; encoder outputs would not align")));
        }
    }
    Ok(())
}

/// Result of a `train` or `distill` run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

fn load_train_set(cfg: &ExperimentConfig) -> Result<Vec<Utterance>> {
    if !cfg.train_data.is_dir() {
        return Err(Error::Usage(format!("training data directory {} does not exist", cfg.train_data.display())));
    }
    read_dataset(&cfg.train_data)
}

/// Runs `trainer` over the training set, writing the metrics log, periodic
/// checkpoints (`step-N.ckpt`) and `final.ckpt` into the output directory.
fn run_to_disk(cfg: &ExperimentConfig, mut trainer: Trainer<'_>, data: &[Utterance]) -> Result<TrainOutcome> {
    let out = &cfg.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics = out.join(METRICS_FILE);
    let mut log = metrics_header(cfg);
    log.push('\n');
    let every = cfg.train.checkpoint_every as u64;
    let rows = trainer.run(data, |row, t| {
        log.push_str(&row.to_csv());
        log.push('\n');
        if every > 0 && row.step % every == 0 {
            save_checkpoint(&out.join(format!("step-{}.ckpt", row.step)), &t.cfg, row.step, &t.model.store)?;
        }
        Ok(())
    })?;
    fs::write(&metrics, log).map_err(|e| Error::io(&metrics, e))?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&checkpoint, cfg, trainer.step, &trainer.model.store)?;
    Ok(TrainOutcome { model: trainer.model, rows, metrics, checkpoint })
}

/// Plain training from a fresh initialization.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_train_set(cfg)?;
    let model = Model::new(&cfg.model, cfg.train.seed)?;
    run_to_disk(cfg, Trainer::new(cfg, model, 0, None)?, &data)
}

/// Distillation from the teacher named in the config. With
/// `train.init_from_teacher` the student starts as an exact copy, which
/// requires the same architecture.
pub fn distill(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let path = cfg.teacher.as_deref().ok_or_else(|| Error::Config("distill needs teacher.checkpoint".into()))?;
    let teacher = load_teacher(path, cfg)?;
    let data = load_train_set(cfg)?;
    let model = if cfg.train.init_from_teacher {
        if teacher.config.arch_hash() != cfg.arch_hash() {
            return Err(Error::Config("train.init_from_teacher needs the teacher's architecture".into()));
        }
        Model { config: cfg.model.clone(), ..teacher.model.clone() }
    } else {
        Model::new(&cfg.model, cfg.train.seed)?
    };
    run_to_disk(cfg, Trainer::new(cfg, model, 0, Some(&teacher.model))?, &data)
}

/// Loads a teacher checkpoint and checks it against the student config.
pub fn load_teacher(path: &Path, student: &ExperimentConfig) -> Result<super::Checkpoint> {
    let teacher = load_checkpoint(path)?;
    check_teacher(&teacher.config.model.encoder, &student.model.encoder)?;
    Ok(teacher)
}

/// Mean per-frame distance between student and teacher encoder outputs on
/// `batch`, both in eval mode.
pub fn eval_kd(student: &Model, teacher: &Model, batch: &[&Utterance]) -> Result<f64> {
    let target = teacher_hidden(teacher, batch)?;
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &student.store);
    let w = crate::seq2seq::LossWeights { alpha: 0.0, beta: 1.0 };
    Ok(model_loss(&ctx, student, batch, w, Some(&target))?.kd_term)
}
