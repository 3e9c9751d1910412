//! Deterministic training loops: teacher pretraining with plain
//! cross-entropy and the KD-QAT loop (full-precision teacher, quantized
//! student) with freeze plans, probes, and artifact output.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::{apply_freeze, kd_loss, trainable_params, Adam, AdamConfig, TrainConfig};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{perplexity, tokenize, Corpus, PplRecord};
use crate::model::{ForwardOpts, MicroLM};
use crate::probe::{Probe, ProbeConfig, TraceSink};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::util::fnv1a64;

/// One training batch: row-major [batch, seq] inputs and next-token
/// targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

/// Sample `batch` windows uniformly from a token stream.
pub fn sample_batch(stream: &[u32], batch: usize, seq_len: usize, rng: &mut Rng) -> Result<Batch> {
    if stream.len() < seq_len + 2 {
        return Err(Error::Invalid(format!(
            "corpus stream of {} tokens too small for seq_len {seq_len}",
            stream.len()
        )));
    }
    let span = stream.len() - seq_len - 1;
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    for _ in 0..batch {
        let o = rng.below(span);
        inputs.extend_from_slice(&stream[o..o + seq_len]);
        targets.extend_from_slice(&stream[o + 1..o + seq_len + 1]);
    }
    Ok(Batch { inputs, targets, batch, seq: seq_len })
}

/// Per-step record written to the metrics JSON-lines log.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub elapsed_ms: f64,
    #[serde(skip)]
    pub tokens_per_s: f64,
}

fn wrap_step_error(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op, node } => Error::NonFiniteLoss {
            step,
            detail: format!("first non-finite output at op '{op}', tape node {node}"),
        },
        other => other,
    }
}

/// Teacher logits provider; optionally caches by batch content.
pub struct TeacherLogits<'a> {
    teacher: &'a MicroLM<f32>,
    cache: Option<HashMap<u64, Tensor<f32>>>,
}

const TEACHER_CACHE_CAP: usize = 128;

impl<'a> TeacherLogits<'a> {
    pub fn new(teacher: &'a MicroLM<f32>, cache: bool) -> Self {
        TeacherLogits { teacher, cache: cache.then(HashMap::new) }
    }

    fn get(&mut self, batch: &Batch) -> Result<Tensor<f32>> {
        let key = self.cache.as_ref().map(|_| {
            let bytes: Vec<u8> =
                batch.inputs.iter().flat_map(|id| id.to_le_bytes()).collect();
            fnv1a64(&bytes)
        });
        if let (Some(cache), Some(k)) = (&self.cache, key) {
            if let Some(hit) = cache.get(&k) {
                return Ok(hit.clone());
            }
        }
        let logits = self.teacher.logits(&batch.inputs, batch.batch, batch.seq, false)?;
        if let (Some(cache), Some(k)) = (&mut self.cache, key) {
            if cache.len() >= TEACHER_CACHE_CAP {
                cache.clear();
            }
            cache.insert(k, logits.clone());
        }
        Ok(logits)
    }
}

/// One KD-QAT step: teacher forward, student forward through the
/// quantizers, distillation loss, straight-through backward, clip, Adam
/// update of the non-frozen parameters, probe observation.
pub fn train_step(
    student: &MicroLM<f32>,
    teacher: &mut TeacherLogits<'_>,
    batch: &Batch,
    kd: &super::KDLossConfig,
    opt: &mut Adam<f32>,
    probe: Option<&mut Probe>,
    step: usize,
) -> Result<StepMetrics> {
    let t0 = Instant::now();
    let teacher_logits = teacher.get(batch).map_err(|e| wrap_step_error(step, e))?;

    student.zero_grads();
    let out = (|| -> Result<(f64, f64, f64, crate::model::ForwardPass<f32>)> {
        let fp = student.forward(&batch.inputs, batch.batch, batch.seq, ForwardOpts::default())?;
        let parts = kd_loss(&fp.logits, &teacher_logits, &batch.targets, kd)?;
        let loss_val = parts.loss.item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite { op: "kd_loss", node: parts.loss.id() });
        }
        parts.loss.backward()?;
        Ok((loss_val, parts.ce, parts.kl, fp))
    })()
    .map_err(|e| wrap_step_error(step, e))?;
    let (loss, ce, kl, fp) = out;

    if let Some(probe) = probe {
        if probe.should_sample(step) {
            probe.observe(step, &fp.projections)?;
        }
    }

    let info = opt.step()?;
    let elapsed = t0.elapsed().as_secs_f64();
    Ok(StepMetrics {
        step,
        loss,
        ce,
        kl,
        grad_norm: info.grad_norm,
        lr: info.lr,
        elapsed_ms: elapsed * 1e3,
        tokens_per_s: (batch.batch * batch.seq) as f64 / elapsed,
    })
}

/// One plain cross-entropy step (teacher pretraining).
fn pretrain_step(
    model: &MicroLM<f32>,
    batch: &Batch,
    opt: &mut Adam<f32>,
    step: usize,
) -> Result<StepMetrics> {
    let t0 = Instant::now();
    model.zero_grads();
    let loss_val = (|| -> Result<f64> {
        let fp = model.forward(&batch.inputs, batch.batch, batch.seq, ForwardOpts::default())?;
        let loss = fp
            .logits
            .log_softmax_last()?
            .gather_last(&batch.targets)?
            .mean_all()?
            .mul_scalar(-1.0f32)?;
        let v = loss.item() as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "ce_loss", node: loss.id() });
        }
        loss.backward()?;
        Ok(v)
    })()
    .map_err(|e| wrap_step_error(step, e))?;
    let info = opt.step()?;
    let elapsed = t0.elapsed().as_secs_f64();
    Ok(StepMetrics {
        step,
        loss: loss_val,
        ce: loss_val,
        kl: 0.0,
        grad_norm: info.grad_norm,
        lr: info.lr,
        elapsed_ms: elapsed * 1e3,
        tokens_per_s: (batch.batch * batch.seq) as f64 / elapsed,
    })
}

fn adam_config(t: &TrainConfig) -> AdamConfig {
    AdamConfig {
        learning_rate: t.learning_rate,
        beta1: t.beta1,
        beta2: t.beta2,
        eps: t.adam_eps,
        warmup_steps: t.warmup_steps,
        grad_clip: t.grad_clip,
    }
}

/// JSON-lines metrics writer.
struct MetricsLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), writer: BufWriter::new(file) })
    }

    fn append<S: Serialize>(&mut self, rec: &S) -> Result<()> {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Invalid(format!("metrics serialization: {e}")))?;
        writeln!(self.writer, "{line}").map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainOutcome {
    pub final_ppl: f64,
    pub steps: usize,
    pub final_loss: f64,
}

/// Train a full-precision model with plain CE on the corpus train
/// split; evaluates on the held-out split.
pub fn pretrain_teacher(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<(MicroLM<f32>, PretrainOutcome)> {
    cfg.validate()?;
    let stream = tokenize(&corpus.train);
    if stream.len() < cfg.train.seq_len + 2 {
        return Err(Error::Invalid(format!(
            "corpus too small: {} train tokens for one batch of seq_len {}",
            stream.len(),
            cfg.train.seq_len
        )));
    }
    let model = MicroLM::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(
        trainable_params(&model).into_iter().map(|(_, p)| p).collect(),
        adam_config(&cfg.train),
    );
    let mut rng = Rng::new(cfg.seed).fork(0x7eac);
    let mut last = 0.0;
    for step in 0..cfg.train.steps {
        let batch = sample_batch(&stream, cfg.train.batch_size, cfg.train.seq_len, &mut rng)?;
        let m = pretrain_step(&model, &batch, &mut opt, step)?;
        last = m.loss;
    }
    let ppl = perplexity(&model, &corpus.held_out, &cfg.eval, false)?;
    Ok((model, PretrainOutcome { final_ppl: ppl.ppl, steps: cfg.train.steps, final_loss: last }))
}

/// Artifact paths produced by a KD-QAT run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSinks {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub trace: PathBuf,
    pub evals: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct KdQatOutcome {
    pub init_ppl: f64,
    pub final_ppl: f64,
    pub steps: usize,
    pub frozen: Vec<String>,
    pub sinks: RunSinks,
}

/// The KD-QAT loop: freeze -> train with probes -> periodic eval ->
/// write checkpoint, trace CSV, metrics JSON-lines.
///
/// The student must already be in its initial (e.g. PTQ-calibrated)
/// state; the teacher runs in eval mode throughout.
pub fn run_kd_qat(
    cfg: &ExperimentConfig,
    teacher: &MicroLM<f32>,
    student: &mut MicroLM<f32>,
    corpus: &Corpus,
    out_dir: &Path,
) -> Result<KdQatOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sinks = RunSinks {
        checkpoint: out_dir.join("student.qatf"),
        metrics: out_dir.join("metrics.jsonl"),
        trace: out_dir.join("trace.csv"),
        evals: out_dir.join("evals.jsonl"),
    };

    let plan = cfg.freeze_plan()?;
    let frozen = apply_freeze(student, &plan);
    let mut opt = Adam::new(
        trainable_params(student).into_iter().map(|(_, p)| p).collect(),
        adam_config(&cfg.train),
    );
    let mut probe = Probe::new(
        ProbeConfig { every_n_steps: cfg.train.trace_every, ..Default::default() },
        TraceSink::create(&sinks.trace)?,
    )?;
    let mut metrics = MetricsLog::create(&sinks.metrics)?;
    let mut evals = MetricsLog::create(&sinks.evals)?;
    let mut teacher_logits = TeacherLogits::new(teacher, cfg.train.cache_teacher_logits);

    let eval_rec = |model: &MicroLM<f32>, tag: &str, step: usize| -> Result<PplRecord> {
        let mut rec = perplexity(model, &corpus.held_out, &cfg.eval, false)?;
        rec.split = format!("held_out@{tag}{step}");
        Ok(rec)
    };
    let init = eval_rec(student, "step", 0)?;
    evals.append(&init)?;

    let stream = tokenize(&corpus.train);
    let mut rng = Rng::new(cfg.seed).fork(0x6d);
    for step in 0..cfg.train.steps {
        let batch = sample_batch(&stream, cfg.train.batch_size, cfg.train.seq_len, &mut rng)?;
        let m = train_step(student, &mut teacher_logits, &batch, &cfg.kd, &mut opt, Some(&mut probe), step)?;
        metrics.append(&m)?;
        if cfg.train.eval_every > 0 && step > 0 && step % cfg.train.eval_every == 0 {
            evals.append(&eval_rec(student, "step", step)?)?;
        }
    }

    let fin = eval_rec(student, "final", cfg.train.steps)?;
    let final_ppl = fin.ppl;
    evals.append(&fin)?;
    probe.finish()?;
    metrics.finish()?;
    evals.finish()?;
    checkpoint::save(&sinks.checkpoint, student, &cfg.to_json_value())?;

    Ok(KdQatOutcome {
        init_ppl: init.ppl,
        final_ppl,
        steps: cfg.train.steps,
        frozen,
        sinks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_quantizers, ModelConfig};

    fn tiny_cfg(out: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig {
            vocab_size: 259,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 32,
            rope_base: 10000.0,
            rmsnorm_eps: 1e-5,
        };
        cfg.train.steps = 4;
        cfg.train.batch_size = 2;
        cfg.train.seq_len = 16;
        cfg.train.warmup_steps = 2;
        cfg.eval = crate::eval::EvalConfig { context_length: 32, stride: 32 };
        cfg.paths.out_dir = std::env::temp_dir().join(out);
        cfg
    }

    fn tiny_corpus() -> Corpus {
        let mut rng = Rng::new(11);
        let bytes: Vec<u8> = (0..4000).map(|_| (rng.below(64) + 32) as u8).collect();
        Corpus::from_bytes(bytes, 0.9).unwrap()
    }

    #[test]
    fn same_seed_identical_loss_sequence() {
        let cfg = tiny_cfg("qatlab_seed_a");
        let corpus = tiny_corpus();
        let run = || -> Vec<f64> {
            let teacher = MicroLM::<f32>::new(cfg.model.clone(), 99).unwrap();
            let mut student = teacher.deep_clone();
            attach_quantizers(
                &mut student,
                cfg.quant.scheme().unwrap(),
                &cfg.quant.policy,
                cfg.quant.method(),
            )
            .unwrap();
            let mut opt = Adam::new(
                trainable_params(&student).into_iter().map(|(_, p)| p).collect(),
                adam_config(&cfg.train),
            );
            let mut tl = TeacherLogits::new(&teacher, false);
            let stream = tokenize(&corpus.train);
            let mut rng = Rng::new(cfg.seed).fork(0x6d);
            let mut losses = Vec::new();
            for step in 0..cfg.train.steps {
                let batch =
                    sample_batch(&stream, cfg.train.batch_size, cfg.train.seq_len, &mut rng)
                        .unwrap();
                let m = train_step(&student, &mut tl, &batch, &cfg.kd, &mut opt, None, step)
                    .unwrap();
                losses.push(m.loss);
            }
            losses
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn teacher_cache_returns_identical_logits() {
        let cfg = tiny_cfg("qatlab_cache");
        let teacher = MicroLM::<f32>::new(cfg.model.clone(), 3).unwrap();
        let mut cached = TeacherLogits::new(&teacher, true);
        let mut uncached = TeacherLogits::new(&teacher, false);
        let batch = Batch { inputs: vec![1; 8], targets: vec![2; 8], batch: 1, seq: 8 };
        let a = cached.get(&batch).unwrap();
        let b = cached.get(&batch).unwrap(); // cache hit
        let c = uncached.get(&batch).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn sample_batch_rejects_short_stream() {
        let mut rng = Rng::new(0);
        assert!(sample_batch(&[1, 2, 3], 1, 8, &mut rng).is_err());
    }
}
