//! Per-op timing at the shapes a default forward uses.
use qatlab_core::rng::Rng;
use qatlab_core::tensor::{Tape, Tensor};
use std::sync::Arc;
use std::time::Instant;

fn timeit(name: &str, reps: usize, mut f: impl FnMut()) {
    f();
    let t0 = Instant::now();
    for _ in 0..reps { f(); }
    println!("{name:<42} {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

fn main() {
    let mut rng = Rng::new(1);
    let x_bsd = Tensor::<f32>::rand_uniform(vec![2, 256, 128], -1.0, 1.0, &mut rng);
    let w_dd = Tensor::<f32>::rand_uniform(vec![128, 128], -0.1, 0.1, &mut rng);
    let w_dff = Tensor::<f32>::rand_uniform(vec![128, 344], -0.1, 0.1, &mut rng);
    let w_head = Tensor::<f32>::rand_uniform(vec![128, 259], -0.1, 0.1, &mut rng);
    let scores_t = Tensor::<f32>::rand_uniform(vec![2, 4, 256, 256], -1.0, 1.0, &mut rng);
    let gate_t = Tensor::<f32>::rand_uniform(vec![2, 256, 344], -1.0, 1.0, &mut rng);
    let norm_w = Tensor::<f32>::full(vec![128], 1.0);
    let qh = Tensor::<f32>::rand_uniform(vec![2, 4, 256, 32], -1.0, 1.0, &mut rng);

    timeit("tape matmul [512,128]@[128,128]", 20, || {
        let t = Tape::new();
        let x = t.constant(x_bsd.clone());
        let w = t.constant(w_dd.clone());
        std::hint::black_box(x.matmul(&w).unwrap());
    });
    timeit("tape matmul [512,128]@[128,344]", 20, || {
        let t = Tape::new();
        let x = t.constant(x_bsd.clone());
        let w = t.constant(w_dff.clone());
        std::hint::black_box(x.matmul(&w).unwrap());
    });
    timeit("tape matmul head [512,128]@[128,259]", 20, || {
        let t = Tape::new();
        let x = t.constant(x_bsd.clone());
        let w = t.constant(w_head.clone());
        std::hint::black_box(x.matmul(&w).unwrap());
    });
    timeit("rmsnorm [2,256,128]", 20, || {
        let t = Tape::new();
        let x = t.constant(x_bsd.clone());
        let w = t.constant(norm_w.clone());
        std::hint::black_box(x.rmsnorm(&w, 1e-5).unwrap());
    });
    timeit("reshape+swap(1,2)+rope [2,256,128]", 20, || {
        let t = Tape::new();
        let x = t.constant(x_bsd.clone());
        let y = x.reshape(vec![2,256,4,32]).unwrap().swap_axes(1,2).unwrap().rope(10000.0).unwrap();
        std::hint::black_box(y);
    });
    timeit("scores qk^T batched [8](256,32)@(32,256)", 20, || {
        let t = Tape::new();
        let q = t.constant(qh.clone());
        let k = t.constant(qh.clone());
        std::hint::black_box(q.matmul(&k.swap_axes(2,3).unwrap()).unwrap());
    });
    timeit("mul_scalar [2,4,256,256]", 20, || {
        let t = Tape::new();
        let s = t.constant(scores_t.clone());
        std::hint::black_box(s.mul_scalar(0.17f32).unwrap());
    });
    let mask: Arc<Vec<bool>> = Arc::new((0..2*4*256*256).map(|i| i % 3 == 0).collect());
    timeit("masked_fill [2,4,256,256]", 20, || {
        let t = Tape::new();
        let s = t.constant(scores_t.clone());
        std::hint::black_box(s.masked_fill(mask.clone(), -1e9).unwrap());
    });
    timeit("softmax [2,4,256,256]", 20, || {
        let t = Tape::new();
        let s = t.constant(scores_t.clone());
        std::hint::black_box(s.softmax_last().unwrap());
    });
    timeit("probs@v batched [8](256,256)@(256,32)", 20, || {
        let t = Tape::new();
        let p = t.constant(scores_t.clone());
        let v = t.constant(qh.clone());
        std::hint::black_box(p.matmul(&v).unwrap());
    });
    timeit("silu [2,256,344]", 20, || {
        let t = Tape::new();
        let g = t.constant(gate_t.clone());
        std::hint::black_box(g.silu().unwrap());
    });
    timeit("embedding 512 ids", 50, || {
        let t = Tape::new();
        let e = t.constant(w_head.clone());
        std::hint::black_box(e.embedding(&vec![5u32; 512], &[2, 256]).unwrap());
    });
    timeit("log_softmax logits [512,259]", 20, || {
        let t = Tape::new();
        let x = t.constant(Tensor::<f32>::rand_uniform(vec![2,256,259], -1.0, 1.0, &mut Rng::new(2)));
        std::hint::black_box(x.log_softmax_last().unwrap());
    });
}
