//! Synthetic token-to-frames task and its on-disk format.
//!
//! A dataset is a directory holding two files:
//!
//! - `feats.bin`: utterances back to back, each as `u32 id_len`, the id
//!   bytes (UTF-8), `u32 T`, `u32 F`, then `T·F` row-major `f32` values.
//!   Every integer and float is little-endian.
//! - `text`: one line per utterance, `id tok tok …` with decimal token ids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::SyntheticSpec;
use crate::error::{Error, Result};
use crate::seq2seq::{Utterance, FIRST_TOKEN};
use crate::tensor::{gaussian, Rng, Stream, Tensor};

pub const FEATS_FILE: &str = "feats.bin";
pub const TEXT_FILE: &str = "text";

/// Which split to draw; the two splits use independent streams of one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One fixed pattern per regular token, drawn from `pattern_seed` so that
/// train and test sets share them.
fn token_patterns(spec: &SyntheticSpec, vocab: usize, feature_dim: usize) -> Result<Vec<Tensor>> {
    let mut rng = Rng::new(spec.pattern_seed).fork(Stream::Synth, 0);
    (FIRST_TOKEN..vocab).map(|_| gaussian(&mut rng, [spec.frames_per_token, feature_dim], 1.0)).collect()
}

/// Generates `n` utterances. Each token emits `frames_per_token` frames of
/// its pattern plus `N(0, noise_std²)` noise. Deterministic per
/// `(spec, seed, split)`.
pub fn synth_utterances(
    spec: &SyntheticSpec,
    vocab: usize,
    feature_dim: usize,
    n: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<Utterance>> {
    if vocab <= FIRST_TOKEN {
        return Err(Error::Config(format!("synthetic data needs vocab > {FIRST_TOKEN}, got {vocab}")));
    }
    if spec.frames_per_token < 4 {
        return Err(Error::Config("synth.frames_per_token must be >= 4".into()));
    }
    let patterns = token_patterns(spec, vocab, feature_dim)?;
    let mut rng = Rng::new(seed).fork(Stream::Synth, 1 + split as u64);
    let width = n.max(1).to_string().len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.range_inclusive(spec.min_tokens, spec.max_tokens);
        let tokens: Vec<usize> = (0..len).map(|_| rng.range_inclusive(FIRST_TOKEN, vocab - 1)).collect();
        let mut data = Vec::with_capacity(len * spec.frames_per_token * feature_dim);
        for &t in &tokens {
            data.extend_from_slice(patterns[t - FIRST_TOKEN].data());
        }
        let noise = gaussian(&mut rng, [data.len()], spec.noise_std)?;
        for (v, e) in data.iter_mut().zip(noise.data()) {
            // Stored as f32 on disk; round now so memory and disk agree.
            *v = (*v + e) as f32 as f64;
        }
        let features = Tensor::new([len * spec.frames_per_token, feature_dim], data)?;
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        out.push(Utterance { id: format!("{prefix}-{i:0width$}"), features, tokens });
    }
    Ok(out)
}

fn put_u32(buf: &mut Vec<u8>, v: usize, path: &Path) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(path, format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Writes `utts` into directory `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, utts: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let feats_path = dir.join(FEATS_FILE);
    let mut feats = Vec::new();
    let mut text = String::new();
    for u in utts {
        if u.id.is_empty() || u.id.contains(char::is_whitespace) {
            return Err(Error::format(&feats_path, format!("utterance id {:?} is empty or has whitespace", u.id)));
        }
        let (t, f) = u.features.rows_cols();
        put_u32(&mut feats, u.id.len(), &feats_path)?;
        feats.extend_from_slice(u.id.as_bytes());
        put_u32(&mut feats, t, &feats_path)?;
        put_u32(&mut feats, f, &feats_path)?;
        for &v in u.features.data() {
            feats.extend_from_slice(&(v as f32).to_le_bytes());
        }
        text.push_str(&u.id);
        for t in &u.tokens {
            text.push(' ');
            text.push_str(&t.to_string());
        }
        text.push('\n');
    }
    fs::write(&feats_path, feats).map_err(|e| Error::io(&feats_path, e))?;
    let text_path = dir.join(TEXT_FILE);
    fs::write(&text_path, text).map_err(|e| Error::io(&text_path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Reads a dataset directory. Utterances come back in `feats.bin` order;
/// every one must have exactly one transcript line and vice versa.
pub fn read_dataset(dir: &Path) -> Result<Vec<Utterance>> {
    let feats_path = dir.join(FEATS_FILE);
    let text_path = dir.join(TEXT_FILE);
    let bytes = fs::read(&feats_path).map_err(|e| Error::io(&feats_path, e))?;
    let text = fs::read_to_string(&text_path).map_err(|e| Error::io(&text_path, e))?;

    let mut transcripts = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let tokens = fields
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(&text_path, format!("line {}: {e}", n + 1)))?;
        if transcripts.insert(id.to_string(), tokens).is_some() {
            return Err(Error::format(&text_path, format!("line {}: duplicate id {id}", n + 1)));
        }
    }

    let mut r = Reader { bytes: &bytes, pos: 0, path: &feats_path };
    let mut utts = Vec::new();
    while r.pos < bytes.len() {
        let id_len = r.u32()?;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::format(&feats_path, "utterance id is not UTF-8"))?
            .to_string();
        let (t, f) = (r.u32()?, r.u32()?);
        let raw = r.take(t.checked_mul(f).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::format(&feats_path, "size overflow"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let tokens = transcripts
            .remove(&id)
            .ok_or_else(|| Error::format(&text_path, format!("no transcript for utterance {id}")))?;
        utts.push(Utterance { id, features: Tensor::new([t, f], data)?, tokens });
    }
    if let Some(id) = transcripts.keys().next() {
        return Err(Error::format(&feats_path, format!("no features for utterance {id}")));
    }
    Ok(utts)
}

/// Paths of a dataset, for error messages that must name them.
pub fn dataset_files(dir: &Path) -> [PathBuf; 2] {
    [dir.join(FEATS_FILE), dir.join(TEXT_FILE)]
}
