//! Matrix-multiply kernels. The only place in the engine where work is
//! parallelized: output rows are partitioned across threads and every
//! output element is accumulated by a single task in ascending-k order,
//! so results are run-to-run identical on one platform.

use super::Scalar;
use rayon::prelude::*;
use std::sync::OnceLock;

static POOL_INIT: OnceLock<()> = OnceLock::new();

/// Honor QATF_THREADS on first use; otherwise rayon picks the default.
pub(crate) fn ensure_pool() {
    POOL_INIT.get_or_init(|| {
        if let Ok(v) = std::env::var("QATF_THREADS") {
            if let Ok(threads) = v.trim().parse::<usize>() {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads.max(1))
                    .build_global();
            }
        }
    });
}

/// c[rows, n] = a[rows, k] @ b[k, n], parallel over row blocks.
pub fn matmul_rows<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    ensure_pool();
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    let block = row_block(m);
    c.par_chunks_mut(block * n)
        .enumerate()
        .for_each(|(bi, cb)| {
            let r0 = bi * block;
            let rows = cb.len() / n;
            T::gemm_rows(&a[r0 * k..(r0 + rows) * k], b, cb, rows, k, n);
        });
    c
}

/// Batched GEMM: c[i] = a[i] @ b[i] for i in 0..batch, parallel over batch.
pub fn matmul_batched<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    ensure_pool();
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    let mut c = vec![T::zero(); batch * m * n];
    c.par_chunks_mut(m * n).enumerate().for_each(|(i, cb)| {
        T::gemm_rows(&a[i * m * k..(i + 1) * m * k], &b[i * k * n..(i + 1) * k * n], cb, m, k, n);
    });
    c
}

fn row_block(m: usize) -> usize {
    // A few blocks per worker; block boundaries never change per-element math.
    let workers = rayon::current_num_threads().max(1);
    (m / (4 * workers)).max(8).min(m.max(1))
}

/// Portable kernel: 4-row blocking over a shared pass of b, plain
/// mul+add so f32 results match the autovectorized code exactly.
pub(crate) fn gemm_rows_scalar<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    rows: usize,
    k: usize,
    n: usize,
) {
    let mut i = 0;
    while i + 4 <= rows {
        let (c0, rest) = c[i * n..].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3x) = rest.split_at_mut(n);
        let c3 = &mut c3x[..n];
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let br = &b[p * n..p * n + n];
            for j in 0..n {
                c0[j] = c0[j] + a0 * br[j];
                c1[j] = c1[j] + a1 * br[j];
                c2[j] = c2[j] + a2 * br[j];
                c3[j] = c3[j] + a3 * br[j];
            }
        }
        i += 4;
    }
    while i < rows {
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let ai = a[i * k + p];
            let br = &b[p * n..p * n + n];
            for j in 0..n {
                cr[j] = cr[j] + ai * br[j];
            }
        }
        i += 1;
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    /// Same loop nest compiled with AVX2+FMA enabled; fused multiply-add
    /// keeps each element a fixed-order accumulation chain, so the result
    /// is deterministic on any machine that takes this path.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gemm_rows_f32_fma(
        a: &[f32],
        b: &[f32],
        c: &mut [f32],
        rows: usize,
        k: usize,
        n: usize,
    ) {
        let mut i = 0;
        while i + 4 <= rows {
            let (c0, rest) = c[i * n..].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3x) = rest.split_at_mut(n);
            let c3 = &mut c3x[..n];
            for p in 0..k {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let br = &b[p * n..p * n + n];
                for j in 0..n {
                    c0[j] = a0.mul_add(br[j], c0[j]);
                    c1[j] = a1.mul_add(br[j], c1[j]);
                    c2[j] = a2.mul_add(br[j], c2[j]);
                    c3[j] = a3.mul_add(br[j], c3[j]);
                }
            }
            i += 4;
        }
        while i < rows {
            let cr = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let ai = a[i * k + p];
                let br = &b[p * n..p * n + n];
                for j in 0..n {
                    cr[j] = ai.mul_add(br[j], cr[j]);
                }
            }
            i += 1;
        }
    }

    pub(super) fn fma_available() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }
}

pub(crate) fn gemm_rows_f32(a: &[f32], b: &[f32], c: &mut [f32], rows: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        static HAS_FMA: OnceLock<bool> = OnceLock::new();
        if *HAS_FMA.get_or_init(x86::fma_available) {
            // Safety: feature presence checked above.
            unsafe { x86::gemm_rows_f32_fma(a, b, c, rows, k, n) };
            return;
        }
    }
    gemm_rows_scalar(a, b, c, rows, k, n)
}

/// out[cols, rows] = transpose of x[rows, cols].
pub fn transpose2d<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}
