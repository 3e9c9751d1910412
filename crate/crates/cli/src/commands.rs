//! Command implementations composing the core library.

use std::path::{Path, PathBuf};

use serde::Serialize;

use qatlab_core::checkpoint;
use qatlab_core::config::ExperimentConfig;
use qatlab_core::distill::{run_kd_qat, FreezePlan};
use qatlab_core::error::{Error, Result};
use qatlab_core::eval::{perplexity, Corpus};
use qatlab_core::model::{
    attach_quantizers, calibrate_activations_minmax, CalibrationMethod, MicroLM, WeightRole,
};
use qatlab_core::probe;
use qatlab_core::quant::reconstruction_mse;

use crate::MethodArg;

pub const TRAIN_SPLIT_RATIO: f64 = 0.95;

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    Corpus::load(&cfg.paths.corpus, TRAIN_SPLIT_RATIO)
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invalid(format!("serialization: {e}")))?;
    println!("{text}");
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invalid(format!("serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_model_match(cfg: &ExperimentConfig, manifest: &checkpoint::Manifest) -> Result<()> {
    if manifest.model_config != cfg.model {
        return Err(Error::Config(
            "checkpoint model dimensions do not match the config's [model] section".into(),
        ));
    }
    Ok(())
}

pub fn pretrain_teacher(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let corpus = load_corpus(&cfg)?;
    let (model, outcome) = qatlab_core::distill::pretrain_teacher(&cfg, &corpus)?;

    std::fs::create_dir_all(&cfg.paths.out_dir).map_err(|e| Error::io(&cfg.paths.out_dir, e))?;
    let ckpt_path = cfg.paths.out_dir.join("teacher.qatf");
    checkpoint::save(&ckpt_path, &model, &cfg.to_json_value())?;

    let mut rec = perplexity(&model, &corpus.held_out, &cfg.eval, false)?;
    rec.split = "held_out".to_string();
    write_json(&cfg.paths.out_dir.join("teacher_eval.json"), &rec)?;

    #[derive(Serialize)]
    struct Report<'a> {
        checkpoint: &'a Path,
        steps: usize,
        final_train_loss: f64,
        eval: &'a qatlab_core::eval::PplRecord,
    }
    print_json(&Report {
        checkpoint: &ckpt_path,
        steps: outcome.steps,
        final_train_loss: outcome.final_loss,
        eval: &rec,
    })
}

#[derive(Serialize)]
struct TensorMse {
    name: String,
    mse: f64,
}

pub fn calibrate(config: &Path, teacher: &Path, method: MethodArg) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let corpus = load_corpus(&cfg)?;
    let (teacher_model, manifest) = checkpoint::load(teacher)?;
    check_model_match(&cfg, &manifest)?;

    let scheme = cfg.quant.scheme()?;
    let (method_name, cal) = match method {
        MethodArg::Minmax => ("minmax", CalibrationMethod::MinMax),
        MethodArg::Mse => ("mse", CalibrationMethod::Mse { grid_points: cfg.quant.grid_points }),
    };
    let mut student = teacher_model.deep_clone();
    let count = attach_quantizers(&mut student, scheme, &cfg.quant.policy, cal)?;

    let mut per_tensor = Vec::new();
    let mut total = 0.0;
    for (li, layer) in student.layers.iter().enumerate() {
        for (role, lin) in [
            (WeightRole::Q, &layer.attn.wq),
            (WeightRole::K, &layer.attn.wk),
            (WeightRole::V, &layer.attn.wv),
            (WeightRole::O, &layer.attn.wo),
            (WeightRole::Gate, &layer.mlp.w_gate),
            (WeightRole::Up, &layer.mlp.w_up),
            (WeightRole::Down, &layer.mlp.w_down),
        ] {
            if let Some(q) = &lin.quantizer {
                let w = lin.weight.borrow();
                let mse = reconstruction_mse(&w, &q.params, &q.scheme)?;
                total += mse;
                per_tensor.push(TensorMse {
                    name: MicroLM::<f32>::weight_name(li, role),
                    mse,
                });
            }
        }
    }

    let mut rec = perplexity(&student, &corpus.held_out, &cfg.eval, false)?;
    rec.split = "held_out".to_string();

    std::fs::create_dir_all(&cfg.paths.out_dir).map_err(|e| Error::io(&cfg.paths.out_dir, e))?;
    let ckpt_path = cfg.paths.out_dir.join(format!("ptq_{method_name}.qatf"));
    checkpoint::save(&ckpt_path, &student, &cfg.to_json_value())?;

    #[derive(Serialize)]
    struct Report<'a> {
        method: &'a str,
        checkpoint: &'a Path,
        quantized_tensors: usize,
        total_reconstruction_mse: f64,
        mean_reconstruction_mse: f64,
        per_tensor: &'a [TensorMse],
        eval: &'a qatlab_core::eval::PplRecord,
    }
    let report = Report {
        method: method_name,
        checkpoint: &ckpt_path,
        quantized_tensors: count,
        total_reconstruction_mse: total,
        mean_reconstruction_mse: total / count.max(1) as f64,
        per_tensor: &per_tensor,
        eval: &rec,
    };
    write_json(&cfg.paths.out_dir.join(format!("ptq_{method_name}_report.json")), &report)?;
    print_json(&report)
}

pub fn kdqat(
    config: &Path,
    teacher: &Path,
    ptq: Option<&Path>,
    freeze: Option<&str>,
    fp: bool,
    force: bool,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(preset) = freeze {
        preset.parse::<FreezePlan>()?;
        cfg.freeze = preset.to_string();
    }
    if fp {
        cfg.quant.enabled = false;
    }
    cfg.validate()?;
    let corpus = load_corpus(&cfg)?;

    let (teacher_model, manifest) = checkpoint::load(teacher)?;
    check_model_match(&cfg, &manifest)?;

    let mut student = if fp {
        teacher_model.deep_clone()
    } else if let Some(ptq_path) = ptq {
        let (student, smanifest) = checkpoint::load(ptq_path)?;
        check_model_match(&cfg, &smanifest)?;
        if student.quantizer_count() == 0 {
            return Err(Error::Invalid(format!(
                "{} carries no quantizers; run `qatlab calibrate` first or drop --ptq",
                ptq_path.display()
            )));
        }
        student
    } else {
        let mut s = teacher_model.deep_clone();
        attach_quantizers(&mut s, cfg.quant.scheme()?, &cfg.quant.policy, cfg.quant.method())?;
        s
    };

    // Run directory is a pure function of (config, seed).
    let run_dir = cfg.paths.out_dir.join(format!("run-{}-s{}", cfg.run_hash(), cfg.seed));
    if run_dir.exists() {
        if !force {
            return Err(Error::Invalid(format!(
                "run directory {} already exists (pass --force to overwrite)",
                run_dir.display()
            )));
        }
        std::fs::remove_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    }
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    let outcome = run_kd_qat(&cfg, &teacher_model, &mut student, &corpus, &run_dir)?;
    write_json(&run_dir.join("summary.json"), &outcome)?;
    print_json(&outcome)
}

pub fn eval(
    config: &Path,
    ckpt: &Path,
    w4a16: bool,
    split: &str,
    out: Option<&Path>,
    save_act: Option<&Path>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let corpus = load_corpus(&cfg)?;
    let (mut model, manifest) = checkpoint::load(ckpt)?;
    cfg.eval.validate(model.config.max_seq_len)?;

    let bytes = match split {
        "held_out" => &corpus.held_out,
        "train" => &corpus.train,
        other => {
            return Err(Error::Invalid(format!(
                "unknown split '{other}' (expected held_out | train)"
            )))
        }
    };

    if w4a16 && model.activation_quant.is_none() {
        // Calibrate activation ranges on a deterministic sample of
        // train-split windows.
        let stream = qatlab_core::eval::tokenize(&corpus.train);
        let ctx = cfg.eval.context_length.min(model.config.max_seq_len);
        let mut sample = Vec::new();
        for w in 0..4 {
            let start = w * ctx;
            if start + ctx <= stream.len() {
                sample.push((stream[start..start + ctx].to_vec(), 1usize, ctx));
            }
        }
        if sample.is_empty() {
            return Err(Error::Invalid("corpus too small to calibrate activations".into()));
        }
        calibrate_activations_minmax(&mut model, &sample, cfg.quant.act_bits)?;
    }
    if let Some(path) = save_act {
        if !w4a16 {
            return Err(Error::Invalid("--save-act requires --w4a16".into()));
        }
        checkpoint::save(path, &model, &manifest.config_snapshot)?;
    }

    let mut rec = perplexity(&model, bytes, &cfg.eval, w4a16)?;
    rec.split = split.to_string();
    if let Some(path) = out {
        write_json(path, &rec)?;
    }
    print_json(&rec)
}

pub fn trace_report(trace: &Path, out: Option<&Path>) -> Result<()> {
    let default_dir = trace.parent().unwrap_or_else(|| Path::new(".")).join("report");
    let out_dir: PathBuf = out.map(Path::to_path_buf).unwrap_or(default_dir);
    let report = probe::trace_report(trace, &out_dir)?;

    if report.records == 0 {
        eprintln!("warning: trace contains no records; summary is empty");
    }
    println!(
        "{:>8} {:>12} {:>12} {:>12} {:>12} {:>9} {:>9} {:>9} {:>9}",
        "layer", "q_median", "k_median", "v_median", "o_median", "o/q", "o/k", "v/q", "v/k"
    );
    for row in &report.summary {
        println!(
            "{:>8} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            row.layer_id,
            row.q_median,
            row.k_median,
            row.v_median,
            row.o_median,
            row.o_over_q,
            row.o_over_k,
            row.v_over_q,
            row.v_over_k
        );
    }
    eprintln!(
        "wrote {} series/summary files to {}",
        report.series_files.len(),
        out_dir.display()
    );
    Ok(())
}
