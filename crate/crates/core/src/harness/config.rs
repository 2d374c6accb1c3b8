//! Flat `section.key = value` experiment configuration.
//!
//! Every key has a desk-scale default, so a file only lists what it
//! changes. Unknown keys, duplicate keys and malformed values are errors.
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::seq2seq::{DecoderConfig, LossWeights, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_scale: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps (0 = no cap).
    pub max_steps: usize,
    /// Write a checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: usize,
    /// Start the student from the teacher's weights (distillation only).
    pub init_from_teacher: bool,
}

/// Synthetic task generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub frames_per_token: usize,
    pub noise_std: f64,
    /// Seed of the per-token frame patterns, shared by train and test sets.
    pub pattern_seed: u64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub train_utterances: usize,
    pub test_utterances: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub beam: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub eval: EvalConfig,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub output: PathBuf,
    pub teacher: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    blocks: 1,
                    groups: 2,
                    experts: 2,
                    dim: 64,
                    heads: 4,
                    kernel: 15,
                    ffn_dim: 256,
                    conv_expansion: 2,
                    dropout: 0.1,
                    noise_std: 0.1,
                    share_norms: false,
                    share_routers: false,
                    feature_dim: 16,
                    frontend_channels: 4,
                },
                decoder: DecoderConfig { layers: 1, dim: 64, heads: 4, ffn_dim: 256, vocab: 12, dropout: 0.1 },
            },
            loss: LossWeights { alpha: 0.01, beta: 0.005 },
            optim: OptimConfig { lr_scale: 1.0, warmup: 400, beta1: 0.9, beta2: 0.98, eps: 1e-9 },
            train: TrainConfig {
                seed: 1,
                epochs: 10,
                batch_size: 8,
                max_steps: 0,
                checkpoint_every: 0,
                init_from_teacher: false,
            },
            synth: SyntheticSpec {
                frames_per_token: 4,
                noise_std: 0.1,
                pattern_seed: 7,
                min_tokens: 2,
                max_tokens: 6,
                train_utterances: 256,
                test_utterances: 32,
            },
            eval: EvalConfig { beam: 4, max_len: 12 },
            train_data: PathBuf::from("data/train"),
            test_data: PathBuf::from("data/test"),
            output: PathBuf::from("out"),
            teacher: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

/// Keys that define the network shape; their values make up the
/// architecture hash stored in checkpoints.
const ARCH_KEYS: &[&str] = &[
    "encoder.blocks",
    "encoder.groups",
    "encoder.experts",
    "encoder.dim",
    "encoder.heads",
    "encoder.kernel",
    "encoder.ffn_dim",
    "encoder.conv_expansion",
    "encoder.share_norms",
    "encoder.share_routers",
    "encoder.feature_dim",
    "encoder.frontend_channels",
    "decoder.layers",
    "decoder.dim",
    "decoder.heads",
    "decoder.ffn_dim",
    "decoder.vocab",
];

impl ExperimentConfig {
    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let path = |p: &Path| p.display().to_string();
        vec![
            ("encoder.blocks", e.blocks.to_string()),
            ("encoder.groups", e.groups.to_string()),
            ("encoder.experts", e.experts.to_string()),
            ("encoder.dim", e.dim.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.kernel", e.kernel.to_string()),
            ("encoder.ffn_dim", e.ffn_dim.to_string()),
            ("encoder.conv_expansion", e.conv_expansion.to_string()),
            ("encoder.dropout", e.dropout.to_string()),
            ("encoder.noise_std", e.noise_std.to_string()),
            ("encoder.share_norms", e.share_norms.to_string()),
            ("encoder.share_routers", e.share_routers.to_string()),
            ("encoder.feature_dim", e.feature_dim.to_string()),
            ("encoder.frontend_channels", e.frontend_channels.to_string()),
            ("decoder.layers", d.layers.to_string()),
            ("decoder.dim", d.dim.to_string()),
            ("decoder.heads", d.heads.to_string()),
            ("decoder.ffn_dim", d.ffn_dim.to_string()),
            ("decoder.vocab", d.vocab.to_string()),
            ("decoder.dropout", d.dropout.to_string()),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.beta", self.loss.beta.to_string()),
            ("optim.lr_scale", self.optim.lr_scale.to_string()),
            ("optim.warmup", self.optim.warmup.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.max_steps", self.train.max_steps.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.init_from_teacher", self.train.init_from_teacher.to_string()),
            ("synth.frames_per_token", self.synth.frames_per_token.to_string()),
            ("synth.noise_std", self.synth.noise_std.to_string()),
            ("synth.pattern_seed", self.synth.pattern_seed.to_string()),
            ("synth.min_tokens", self.synth.min_tokens.to_string()),
            ("synth.max_tokens", self.synth.max_tokens.to_string()),
            ("synth.train_utterances", self.synth.train_utterances.to_string()),
            ("synth.test_utterances", self.synth.test_utterances.to_string()),
            ("eval.beam", self.eval.beam.to_string()),
            ("eval.max_len", self.eval.max_len.to_string()),
            ("data.train", path(&self.train_data)),
            ("data.test", path(&self.test_data)),
            ("output.dir", path(&self.output)),
            ("teacher.checkpoint", self.teacher.as_deref().map(path).unwrap_or_default()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let d = &mut self.model.decoder;
        match key {
            "encoder.blocks" => e.blocks = parse(key, value)?,
            "encoder.groups" => e.groups = parse(key, value)?,
            "encoder.experts" => e.experts = parse(key, value)?,
            "encoder.dim" => e.dim = parse(key, value)?,
            "encoder.heads" => e.heads = parse(key, value)?,
            "encoder.kernel" => e.kernel = parse(key, value)?,
            "encoder.ffn_dim" => e.ffn_dim = parse(key, value)?,
            "encoder.conv_expansion" => e.conv_expansion = parse(key, value)?,
            "encoder.dropout" => e.dropout = parse(key, value)?,
            "encoder.noise_std" => e.noise_std = parse(key, value)?,
            "encoder.share_norms" => e.share_norms = parse_bool(key, value)?,
            "encoder.share_routers" => e.share_routers = parse_bool(key, value)?,
            "encoder.feature_dim" => e.feature_dim = parse(key, value)?,
            "encoder.frontend_channels" => e.frontend_channels = parse(key, value)?,
            "decoder.layers" => d.layers = parse(key, value)?,
            "decoder.dim" => d.dim = parse(key, value)?,
            "decoder.heads" => d.heads = parse(key, value)?,
            "decoder.ffn_dim" => d.ffn_dim = parse(key, value)?,
            "decoder.vocab" => d.vocab = parse(key, value)?,
            "decoder.dropout" => d.dropout = parse(key, value)?,
            "loss.alpha" => self.loss.alpha = parse(key, value)?,
            "loss.beta" => self.loss.beta = parse(key, value)?,
            "optim.lr_scale" => self.optim.lr_scale = parse(key, value)?,
            "optim.warmup" => self.optim.warmup = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.eps" => self.optim.eps = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.max_steps" => self.train.max_steps = parse(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "train.init_from_teacher" => self.train.init_from_teacher = parse_bool(key, value)?,
            "synth.frames_per_token" => self.synth.frames_per_token = parse(key, value)?,
            "synth.noise_std" => self.synth.noise_std = parse(key, value)?,
            "synth.pattern_seed" => self.synth.pattern_seed = parse(key, value)?,
            "synth.min_tokens" => self.synth.min_tokens = parse(key, value)?,
            "synth.max_tokens" => self.synth.max_tokens = parse(key, value)?,
            "synth.train_utterances" => self.synth.train_utterances = parse(key, value)?,
            "synth.test_utterances" => self.synth.test_utterances = parse(key, value)?,
            "eval.beam" => self.eval.beam = parse(key, value)?,
            "eval.max_len" => self.eval.max_len = parse(key, value)?,
            "data.train" => self.train_data = PathBuf::from(value),
            "data.test" => self.test_data = PathBuf::from(value),
            "output.dir" => self.output = PathBuf::from(value),
            "teacher.checkpoint" => self.teacher = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. `decoder.dim` follows
    /// `encoder.dim` unless set explicitly.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        if !seen.contains_key("decoder.dim") {
            cfg.model.decoder.dim = cfg.model.encoder.dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_data, &mut cfg.test_data, &mut cfg.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(t) = cfg.teacher.as_mut().filter(|t| t.is_relative()) {
            *t = base.join(&*t);
        }
        Ok(cfg)
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.optim.warmup < 1 {
            return fail("optim.warmup must be >= 1");
        }
        if !(self.optim.lr_scale > 0.0) || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return fail("optim.lr_scale must be > 0 and the betas in [0, 1)");
        }
        if !(self.optim.eps > 0.0) {
            return fail("optim.eps must be > 0");
        }
        if self.train.batch_size < 1 {
            return fail("train.batch_size must be >= 1");
        }
        let s = &self.synth;
        if s.frames_per_token < 4 {
            return fail("synth.frames_per_token must be >= 4");
        }
        if s.min_tokens < 1 || s.min_tokens > s.max_tokens {
            return fail("synth token range must satisfy 1 <= min_tokens <= max_tokens");
        }
        if s.min_tokens * s.frames_per_token < 7 {
            return fail("synth.min_tokens * synth.frames_per_token must be >= 7 to survive subsampling");
        }
        if !(s.noise_std >= 0.0) {
            return fail("synth.noise_std must be >= 0");
        }
        if self.eval.beam < 1 || self.eval.max_len < 1 {
            return fail("eval.beam and eval.max_len must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 over the architecture keys, hex encoded.
    pub fn arch_hash(&self) -> String {
        let entries = self.entries();
        let mut h = Sha256::new();
        for key in ARCH_KEYS {
            let (_, v) = entries.iter().find(|(k, _)| k == key).expect("architecture key listed in entries");
            h.update(format!("{key}={v}\n").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
