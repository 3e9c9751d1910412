//! Throughput probe: time default-size KD training steps end to end.
use qatlab_core::config::ExperimentConfig;
use qatlab_core::distill::{
    sample_batch, train_step, trainable_params, Adam, AdamConfig, TeacherLogits,
};
use qatlab_core::eval::{tokenize, Corpus};
use qatlab_core::model::{attach_quantizers, MicroLM};
use qatlab_core::rng::Rng;
use std::time::Instant;

fn main() {
    let cfg = ExperimentConfig::default();
    let mut rng = Rng::new(1);
    let bytes: Vec<u8> = (0..200_000).map(|_| (rng.below(64) + 32) as u8).collect();
    let corpus = Corpus::from_bytes(bytes, 0.95).unwrap();
    let teacher = MicroLM::<f32>::new(cfg.model.clone(), 0).unwrap();
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
        AdamConfig::default(),
    );
    let mut tl = TeacherLogits::new(&teacher, false);
    let stream = tokenize(&corpus.train);
    let mut brng = Rng::new(0);

    let b = sample_batch(&stream, cfg.train.batch_size, cfg.train.seq_len, &mut brng).unwrap();
    train_step(&student, &mut tl, &b, &cfg.kd, &mut opt, None, 0).unwrap(); // warm

    let n = 10;
    let t0 = Instant::now();
    for step in 1..=n {
        let b = sample_batch(&stream, cfg.train.batch_size, cfg.train.seq_len, &mut brng).unwrap();
        train_step(&student, &mut tl, &b, &cfg.kd, &mut opt, None, step).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!(
        "kd step: {:.1} ms  ({:.0} tok/s)  projected 2000 steps: {:.1} min",
        dt * 1e3,
        (cfg.train.batch_size * cfg.train.seq_len) as f64 / dt,
        dt * 2000.0 / 60.0
    );
}
