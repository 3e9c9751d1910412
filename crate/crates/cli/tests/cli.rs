//! End-to-end command tests on a reduced (smoke-size) model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt").canonicalize().unwrap()
}

fn tmp_root(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qatlab_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn smoke_config(out_dir: &Path, corpus: &Path, steps: usize, seed: u64) -> String {
    format!(
        r#"
seed = {seed}
freeze = "none"

[model]
vocab_size = 259
n_layers = 2
d_model = 32
n_heads = 2
d_ff = 48
max_seq_len = 128
rope_base = 10000.0
rmsnorm_eps = 1e-5

[train]
steps = {steps}
batch_size = 2
seq_len = 64
learning_rate = 1e-3
warmup_steps = 10
trace_every = 10
eval_every = 0

[eval]
context_length = 128
stride = 128

[paths]
corpus = "{corpus}"
out_dir = "{out}"
"#,
        corpus = corpus.display(),
        out = out_dir.display()
    )
}

fn qatlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qatlab")).args(args).output().expect("spawn qatlab")
}

fn expect_ok(out: &Output, what: &str) -> String {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn json_of(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout.trim()).expect("stdout is a JSON document")
}

#[test]
fn missing_corpus_is_a_named_error() {
    let root = tmp_root("missing_corpus");
    let cfg = root.join("cfg.toml");
    std::fs::write(&cfg, smoke_config(&root, Path::new("/no/such/corpus.txt"), 5, 0)).unwrap();
    let out = qatlab(&["pretrain-teacher", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/corpus.txt"), "stderr: {err}");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn unknown_config_key_is_rejected() {
    let root = tmp_root("badkey");
    let cfg = root.join("cfg.toml");
    std::fs::write(&cfg, "mystery_key = 3\n").unwrap();
    let out = qatlab(&["pretrain-teacher", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery_key"));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn pretrain_is_bit_reproducible_and_eval_matches_recorded_ppl() {
    let root = tmp_root("repro");
    let corpus = corpus_path();
    let out_dir = root.join("a");
    let cfg = root.join("a.toml");
    std::fs::write(&cfg, smoke_config(&out_dir, &corpus, 20, 7)).unwrap();
    expect_ok(&qatlab(&["pretrain-teacher", "--config", cfg.to_str().unwrap()]), "pretrain 1");
    let bytes_a = std::fs::read(out_dir.join("teacher.qatf")).unwrap();
    expect_ok(&qatlab(&["pretrain-teacher", "--config", cfg.to_str().unwrap()]), "pretrain 2");
    let bytes_b = std::fs::read(out_dir.join("teacher.qatf")).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seed must produce identical checkpoints");

    // Same code path: eval of the checkpoint reproduces the recorded ppl.
    let recorded: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("teacher_eval.json")).unwrap())
            .unwrap();
    let stdout = expect_ok(
        &qatlab(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            out_dir.join("teacher.qatf").to_str().unwrap(),
        ]),
        "eval",
    );
    let live = json_of(&stdout);
    assert_eq!(live["ppl"], recorded["ppl"], "eval must reuse the exact recorded value");
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn calibrate_reports_mse_dominance_and_ptq_ppl_ordering() {
    let root = tmp_root("calibrate");
    let corpus = corpus_path();
    let cfg = root.join("cfg.toml");
    std::fs::write(&cfg, smoke_config(&root, &corpus, 60, 1)).unwrap();
    let teacher_json = expect_ok(
        &qatlab(&["pretrain-teacher", "--config", cfg.to_str().unwrap()]),
        "pretrain-teacher",
    );
    let teacher_ppl = json_of(&teacher_json)["eval"]["ppl"].as_f64().unwrap();

    let ckpt = root.join("teacher.qatf");
    let mm = json_of(&expect_ok(
        &qatlab(&[
            "calibrate",
            "--config",
            cfg.to_str().unwrap(),
            "--teacher",
            ckpt.to_str().unwrap(),
            "--method",
            "minmax",
        ]),
        "calibrate minmax",
    ));
    let mse = json_of(&expect_ok(
        &qatlab(&[
            "calibrate",
            "--config",
            cfg.to_str().unwrap(),
            "--teacher",
            ckpt.to_str().unwrap(),
            "--method",
            "mse",
        ]),
        "calibrate mse",
    ));

    // 7 roles x 2 layers at smoke size.
    assert_eq!(mm["quantized_tensors"], 14);
    let mm_total = mm["total_reconstruction_mse"].as_f64().unwrap();
    let mse_total = mse["total_reconstruction_mse"].as_f64().unwrap();
    assert!(mse_total <= mm_total, "mse calibration must not lose to min-max");

    // Per-tensor dominance as well.
    for (a, b) in mm["per_tensor"]
        .as_array()
        .unwrap()
        .iter()
        .zip(mse["per_tensor"].as_array().unwrap())
    {
        assert_eq!(a["name"], b["name"]);
        assert!(b["mse"].as_f64().unwrap() <= a["mse"].as_f64().unwrap(), "{}", a["name"]);
    }

    // At smoke scale the teacher is barely trained, so quantization
    // noise can nudge ppl either way; the teacher-vs-PTQ ordering is
    // asserted at default scale in the acceptance suite. Here only
    // sanity-check the magnitudes.
    let ptq_ppl = mse["eval"]["ppl"].as_f64().unwrap();
    assert!(ptq_ppl.is_finite() && ptq_ppl > 1.0);
    assert!(teacher_ppl.is_finite() && teacher_ppl > 1.0);

    // W4A16: 16-bit activation quantization moves ppl by under 1%.
    let w4 = json_of(&expect_ok(
        &qatlab(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            root.join("ptq_mse.qatf").to_str().unwrap(),
        ]),
        "eval w4",
    ));
    let w4a16 = json_of(&expect_ok(
        &qatlab(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            root.join("ptq_mse.qatf").to_str().unwrap(),
            "--w4a16",
        ]),
        "eval w4a16",
    ));
    let (p_w4, p_a16) = (w4["ppl"].as_f64().unwrap(), w4a16["ppl"].as_f64().unwrap());
    assert!(p_a16.is_finite());
    assert!(
        (p_a16 - p_w4).abs() / p_w4 < 0.01,
        "w4a16 ppl {p_a16} deviates more than 1% from w4 ppl {p_w4}"
    );

    // --save-act persists the activation quantizers; re-evaluating the
    // enriched checkpoint skips recalibration and reproduces the ppl.
    let act_ckpt = root.join("ptq_mse_act.qatf");
    expect_ok(
        &qatlab(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            root.join("ptq_mse.qatf").to_str().unwrap(),
            "--w4a16",
            "--save-act",
            act_ckpt.to_str().unwrap(),
        ]),
        "eval --save-act",
    );
    let (saved_model, _) = qatlab_core::checkpoint::load(&act_ckpt).unwrap();
    assert!(saved_model.activation_quant.is_some());
    let again = json_of(&expect_ok(
        &qatlab(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            act_ckpt.to_str().unwrap(),
            "--w4a16",
        ]),
        "eval saved act ckpt",
    ));
    assert_eq!(again["ppl"], w4a16["ppl"]);
    std::fs::remove_dir_all(&root).ok();
}

fn weight_bytes(ckpt: &Path, name_contains: &str) -> Vec<u8> {
    // Compare raw checkpoint bytes of matching tensors through the
    // library loader (simpler than slicing the payload by hand).
    let (model, _) = qatlab_core::checkpoint::load(ckpt).unwrap();
    let mut out = Vec::new();
    for (name, p) in model.named_params() {
        if name.contains(name_contains) {
            for v in p.borrow().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

#[test]
fn kdqat_freeze_contract_run_dirs_and_step0_equality() {
    let root = tmp_root("kdqat");
    let corpus = corpus_path();
    let cfg = root.join("cfg.toml");
    std::fs::write(&cfg, smoke_config(&root, &corpus, 30, 2)).unwrap();
    expect_ok(&qatlab(&["pretrain-teacher", "--config", cfg.to_str().unwrap()]), "pretrain");
    let teacher = root.join("teacher.qatf");
    expect_ok(
        &qatlab(&[
            "calibrate",
            "--config",
            cfg.to_str().unwrap(),
            "--teacher",
            teacher.to_str().unwrap(),
            "--method",
            "mse",
        ]),
        "calibrate",
    );
    let ptq = root.join("ptq_mse.qatf");

    let run = |freeze: &str, force: bool| -> Output {
        let mut args = vec![
            "kdqat",
            "--config",
            cfg.to_str().unwrap(),
            "--teacher",
            teacher.to_str().unwrap(),
            "--ptq",
            ptq.to_str().unwrap(),
            "--freeze",
            freeze,
        ];
        if force {
            args.push("--force");
        }
        qatlab(&args)
    };

    let ov = json_of(&expect_ok(&run("ov", false), "kdqat ov"));
    let ov_ckpt = PathBuf::from(ov["sinks"]["checkpoint"].as_str().unwrap());

    // Frozen roles byte-identical to PTQ init; q changed.
    for role in ["wo", "wv"] {
        assert_eq!(
            weight_bytes(&ptq, role),
            weight_bytes(&ov_ckpt, role),
            "{role} must stay byte-identical under ov-freeze"
        );
    }
    assert_ne!(weight_bytes(&ptq, "wq"), weight_bytes(&ov_ckpt, "wq"));

    // Re-running without --force refuses; with --force succeeds.
    let refused = run("ov", false);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    expect_ok(&run("ov", true), "kdqat ov --force");

    // Different freeze preset lands in a different run directory and
    // diverges in q weights, but step-0 losses must agree.
    let none = json_of(&expect_ok(&run("none", false), "kdqat none"));
    let none_ckpt = PathBuf::from(none["sinks"]["checkpoint"].as_str().unwrap());
    assert_ne!(ov_ckpt, none_ckpt, "run dirs must differ by config hash");
    assert_ne!(weight_bytes(&none_ckpt, "wq"), weight_bytes(&ov_ckpt, "wq"));

    let first_loss = |metrics: &str| -> f64 {
        let text = std::fs::read_to_string(metrics).unwrap();
        let rec: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        rec["loss"].as_f64().unwrap()
    };
    let ov_m = ov["sinks"]["metrics"].as_str().unwrap().to_string();
    let none_m = none["sinks"]["metrics"].as_str().unwrap().to_string();
    assert_eq!(
        first_loss(&ov_m).to_bits(),
        first_loss(&none_m).to_bits(),
        "step-0 loss must not depend on the freeze plan"
    );
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn trace_report_formats_and_rejects_malformed_rows() {
    let root = tmp_root("trace");
    // Synthetic, well-formed trace.
    let trace = root.join("trace.csv");
    let mut text = String::from("step,layer_id,proj,stat,value\n");
    for step in [0, 10] {
        for (p, v) in [("q", 1.0), ("k", 2.0), ("v", 100.0), ("o", 50.0)] {
            text.push_str(&format!("{step},0,{p},grad_norm_sq,{v:.8e}\n"));
            text.push_str(&format!("{step},0,{p},fwd_mean,{:.8e}\n", v / 10.0));
        }
    }
    std::fs::write(&trace, text).unwrap();
    let out_dir = root.join("report");
    let stdout = expect_ok(
        &qatlab(&[
            "trace-report",
            "--trace",
            trace.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]),
        "trace-report",
    );
    assert!(stdout.contains("o/q"), "header row shows ratio columns: {stdout}");
    assert!(out_dir.join("summary.csv").exists());
    assert!(out_dir.join("layer0_grad_norm_sq.csv").exists());
    assert!(out_dir.join("layer0_fwd_mean.csv").exists());
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    // v/q median ratio is exactly 100.
    assert!(row.split(',').nth(7).unwrap().starts_with("1.00000000e2"), "{row}");

    // Malformed line reports its number and exits nonzero.
    let bad = root.join("bad.csv");
    std::fs::write(&bad, "step,layer_id,proj,stat,value\n0,0,q,grad_norm_sq,1.0\nwhat\n").unwrap();
    let out = qatlab(&["trace-report", "--trace", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn random_weights_model_evaluates_near_vocab_size() {
    let root = tmp_root("randppl");
    let corpus = corpus_path();
    let cfg_path = root.join("cfg.toml");
    std::fs::write(&cfg_path, smoke_config(&root, &corpus, 5, 3)).unwrap();
    // Save an untrained model directly through the library.
    let cfg = qatlab_core::config::ExperimentConfig::load(&cfg_path).unwrap();
    let model = qatlab_core::model::MicroLM::<f32>::new(cfg.model.clone(), 123).unwrap();
    let ckpt = root.join("random.qatf");
    qatlab_core::checkpoint::save(&ckpt, &model, &cfg.to_json_value()).unwrap();

    let rec = json_of(&expect_ok(
        &qatlab(&[
            "eval",
            "--config",
            cfg_path.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
        ]),
        "eval random",
    ));
    let ppl = rec["ppl"].as_f64().unwrap();
    assert!(
        (200.0..=320.0).contains(&ppl),
        "untrained model ppl {ppl} outside the sanity band around vocab size"
    );
    std::fs::remove_dir_all(&root).ok();
}
