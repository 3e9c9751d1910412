//! Byte-level tokenization, corpus splitting, and teacher-forced
//! perplexity over fixed-length windows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MicroLM, BOS};
use crate::tensor::{log_softmax_rows, Scalar};

/// Windows evaluated together; per-window results are bitwise
/// independent of the grouping, so this only affects speed.
pub const DEFAULT_EVAL_BATCH: usize = 8;

/// Byte-level tokenizer: content ids are the raw bytes, BOS prepended
/// per document.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.iter().map(|&b| b as u32));
    ids
}

/// Inverse of [`tokenize`]: strips one leading BOS, rejects specials in
/// content position.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    let content = if ids.first() == Some(&BOS) { &ids[1..] } else { ids };
    content
        .iter()
        .map(|&id| {
            u8::try_from(id)
                .map_err(|_| Error::Invalid(format!("special token {id} inside content")))
        })
        .collect()
}

/// Train/held-out byte corpus, split deterministically by byte offset.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub held_out: Vec<u8>,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, train_ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&train_ratio) || train_ratio <= 0.0 {
            return Err(Error::Invalid(format!("train_ratio {train_ratio} outside (0, 1)")));
        }
        let cut = (bytes.len() as f64 * train_ratio).floor() as usize;
        if cut == 0 || cut >= bytes.len() {
            return Err(Error::Invalid(format!(
                "corpus of {} bytes too small for a {train_ratio} split",
                bytes.len()
            )));
        }
        let (train, held) = bytes.split_at(cut);
        Ok(Corpus { train: train.to_vec(), held_out: held.to_vec() })
    }

    pub fn load(path: &Path, train_ratio: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes, train_ratio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub context_length: usize,
    /// Window step; equal to context_length means non-overlapping.
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { context_length: 256, stride: 256 }
    }
}

impl EvalConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.stride == 0 || self.stride > self.context_length || self.context_length > max_seq_len
        {
            return Err(Error::Config(format!(
                "need 0 < stride ({}) <= context_length ({}) <= max_seq_len ({max_seq_len})",
                self.stride, self.context_length
            )));
        }
        Ok(())
    }
}

/// One evaluation result, also the JSON record emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PplRecord {
    pub split: String,
    pub ppl: f64,
    pub tokens: usize,
    pub context_length: usize,
}

struct Window {
    start: usize,
    len: usize,        // input length
    score_from: usize, // first scored target offset within the window
}

fn plan_windows(stream_len: usize, ctx: usize, stride: usize) -> Vec<Window> {
    let mut windows = Vec::new();
    let mut scored_until = 1usize; // global index of the next unscored target
    let mut start = 0;
    while start + 1 < stream_len {
        let len = ctx.min(stream_len - 1 - start);
        let first_target = start + 1;
        let score_from = scored_until.saturating_sub(first_target);
        if score_from < len {
            windows.push(Window { start, len, score_from });
            scored_until = start + len + 1;
        }
        if start + len + 1 >= stream_len {
            break;
        }
        start += stride;
    }
    windows
}

/// Teacher-forced perplexity: exp(total NLL / predicted tokens),
/// natural log, deterministic accumulation in window order.
pub fn perplexity<T: Scalar>(
    model: &MicroLM<T>,
    split_bytes: &[u8],
    cfg: &EvalConfig,
    act_quant: bool,
) -> Result<PplRecord> {
    perplexity_with_batch(model, split_bytes, cfg, act_quant, DEFAULT_EVAL_BATCH)
}

pub fn perplexity_with_batch<T: Scalar>(
    model: &MicroLM<T>,
    split_bytes: &[u8],
    cfg: &EvalConfig,
    act_quant: bool,
    batch_windows: usize,
) -> Result<PplRecord> {
    if split_bytes.is_empty() {
        return Err(Error::Invalid("perplexity over an empty split".into()));
    }
    cfg.validate(model.config.max_seq_len)?;
    let stream = tokenize(split_bytes);
    let windows = plan_windows(stream.len(), cfg.context_length, cfg.stride);
    if windows.is_empty() {
        return Err(Error::Invalid("split too short for one window".into()));
    }

    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    let vocab = model.config.vocab_size;

    // Group equal-length windows so they can share a forward pass.
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].len;
        let mut j = i;
        while j < windows.len() && windows[j].len == len && j - i < batch_windows.max(1) {
            j += 1;
        }
        let group = &windows[i..j];
        let mut tokens = Vec::with_capacity(group.len() * len);
        for w in group {
            tokens.extend_from_slice(&stream[w.start..w.start + w.len]);
        }
        let logits = model.logits(&tokens, group.len(), len, act_quant)?;
        let lp = log_softmax_rows(logits.data(), vocab);
        for (wi, w) in group.iter().enumerate() {
            for p in w.score_from..w.len {
                let target = stream[w.start + p + 1] as usize;
                let row = (wi * len + p) * vocab;
                total_nll -= lp[row + target].to_f64();
                total_tokens += 1;
            }
        }
        i = j;
    }

    Ok(PplRecord {
        split: String::new(),
        ppl: (total_nll / total_tokens as f64).exp(),
        tokens: total_tokens,
        context_length: cfg.context_length,
    })
}

/// Naive per-token oracle: one forward per window, per-token softmax in
/// f64. Kept independent of the batched path for cross-checking.
pub fn perplexity_naive<T: Scalar>(
    model: &MicroLM<T>,
    split_bytes: &[u8],
    cfg: &EvalConfig,
) -> Result<f64> {
    let stream = tokenize(split_bytes);
    let windows = plan_windows(stream.len(), cfg.context_length, cfg.stride);
    let vocab = model.config.vocab_size;
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for w in &windows {
        let tokens = &stream[w.start..w.start + w.len];
        let logits = model.logits(tokens, 1, w.len, false)?;
        for p in w.score_from..w.len {
            let row: Vec<f64> =
                logits.data()[p * vocab..(p + 1) * vocab].iter().map(|&v| v.to_f64()).collect();
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
            let target = stream[w.start + p + 1] as usize;
            total_nll -= row[target] - lse;
            total_tokens += 1;
        }
    }
    Ok((total_nll / total_tokens as f64).exp())
}
