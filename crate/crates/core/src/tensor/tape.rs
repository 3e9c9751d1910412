//! Recording tape and differentiable variables.
//!
//! Every forward op appends a node holding the output value and enough
//! context for its backward rule. `backward` walks the nodes in exact
//! reverse recording order and accumulates gradients additively, writing
//! leaf gradients back into their shared parameter tensors.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use rayon::prelude::*;

use super::gemm::{matmul_batched, matmul_rows, transpose2d};
use super::{Scalar, SharedTensor, Tensor};
use crate::error::{Error, Result};

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

/// Row count above which rowwise ops fan out across threads. Each row is
/// always processed sequentially by one task, so the threshold only
/// affects speed, never values.
const PAR_ROWS: usize = 65;
/// Element count above which elementwise ops fan out (fixed chunk size).
const PAR_ELEMS: usize = 1 << 15;
const PAR_CHUNK: usize = 1 << 13;

fn rowwise<T: Scalar>(
    data: &[T],
    cols: usize,
    f: impl Fn(&[T], &mut [T]) + Sync,
) -> Vec<T> {
    debug_assert!(cols > 0 && data.len() % cols == 0);
    let mut out = vec![T::zero(); data.len()];
    let rows = data.len() / cols;
    if rows >= PAR_ROWS {
        out.par_chunks_mut(cols)
            .zip(data.par_chunks(cols))
            .for_each(|(orow, row)| f(row, orow));
    } else {
        for (orow, row) in out.chunks_exact_mut(cols).zip(data.chunks_exact(cols)) {
            f(row, orow);
        }
    }
    out
}

fn elementwise<T: Scalar>(data: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    if data.len() >= PAR_ELEMS {
        let mut out = vec![T::zero(); data.len()];
        out.par_chunks_mut(PAR_CHUNK)
            .zip(data.par_chunks(PAR_CHUNK))
            .for_each(|(o, s)| {
                for (ov, &sv) in o.iter_mut().zip(s) {
                    *ov = f(sv);
                }
            });
        out
    } else {
        data.iter().map(|&x| f(x)).collect()
    }
}

fn elementwise2<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() >= PAR_ELEMS {
        let mut out = vec![T::zero(); a.len()];
        out.par_chunks_mut(PAR_CHUNK)
            .zip(a.par_chunks(PAR_CHUNK).zip(b.par_chunks(PAR_CHUNK)))
            .for_each(|(o, (xa, xb))| {
                for i in 0..o.len() {
                    o[i] = f(xa[i], xb[i]);
                }
            });
        out
    } else {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    }
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut maxv = row[0];
    for &v in row {
        if v > maxv {
            maxv = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - maxv).exp();
    }
    let lse = maxv + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Numerically stable log-softmax over contiguous rows of width `cols`.
/// Shared by the tape op, the distillation loss, and the eval NLL path so
/// identical inputs produce bit-identical outputs everywhere.
pub fn log_softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    rowwise(data, cols, log_softmax_row::<T>)
}

fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    rowwise(data, cols, |row, out| {
        let mut maxv = row[0];
        for &v in row {
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - maxv).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    })
}

/// softmax(scale * x) over row prefixes: row r of each [s, s] block
/// attends to columns 0..=r; later columns are exactly zero.
fn causal_softmax_rows<T: Scalar>(data: &[T], seq: usize, scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    let rows = data.len() / seq;
    let per_row = |r: usize, orow: &mut [T]| {
        let i = r % seq; // position within the block: prefix length i+1
        let row = &data[r * seq..r * seq + seq];
        let mut maxv = row[0] * scale;
        for &v in &row[..i + 1] {
            let v = v * scale;
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for j in 0..i + 1 {
            let e = (row[j] * scale - maxv).exp();
            orow[j] = e;
            sum = sum + e;
        }
        for o in orow[..i + 1].iter_mut() {
            *o = *o / sum;
        }
    };
    if rows >= PAR_ROWS {
        out.par_chunks_mut(seq).enumerate().for_each(|(r, o)| per_row(r, o));
    } else {
        for (r, o) in out.chunks_exact_mut(seq).enumerate() {
            per_row(r, o);
        }
    }
    out
}

enum Op<T: Scalar> {
    Leaf { param: Option<SharedTensor<T>> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, s: T },
    /// Flat GEMM when `b_shared` (b is [k, n], rows of a flattened),
    /// otherwise per-batch GEMM with identical leading dims.
    Matmul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    SwapAxes { a: usize, ax0: usize, ax1: usize },
    Reshape { a: usize },
    Slice { a: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    SoftmaxLast { a: usize },
    /// Fused scale + causal mask + softmax over [b, h, s, s] scores.
    CausalSoftmax { a: usize, scale: T },
    LogSoftmaxLast { a: usize },
    Log { a: usize },
    Exp { a: usize },
    Sqrt { a: usize },
    Sigmoid { a: usize },
    Silu { a: usize },
    Mean { a: usize },
    Sum { a: usize },
    RmsNorm { x: usize, w: usize, rstd: Vec<T> },
    Rope { a: usize, cos: Arc<Vec<T>>, sin: Arc<Vec<T>> },
    Embedding { table: usize, ids: Arc<Vec<u32>> },
    MaskedFill { a: usize, mask: Arc<Vec<bool>> },
    GatherLast { a: usize, ids: Arc<Vec<u32>> },
    /// Forward value supplied by the caller; backward multiplies the
    /// upstream gradient by a fixed mask (straight-through style).
    PassThrough { a: usize, mask: Arc<Vec<T>> },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Recording tape. Cheap to clone (shared handle); single-threaded.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tape node.
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var { tape: self.tape.clone(), id: self.id }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })) }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Leaf node backed by a shared parameter; the current value is
    /// copied in, and backward accumulates into the parameter's grad.
    pub fn leaf(&self, param: &SharedTensor<T>) -> Var<T> {
        let (shape, data, rq) = {
            let p = param.borrow();
            (p.shape().to_vec(), p.data().to_vec(), p.requires_grad)
        };
        self.push(shape, data, rq, Op::Leaf { param: rq.then(|| Rc::clone(param)) })
    }

    /// Constant input: participates in forward only.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        let Tensor { shape, data, .. } = t;
        self.push(shape, data, false, Op::Leaf { param: None })
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool, op: Op<T>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape, data, grad: Vec::new(), needs_grad, op });
        Var { tape: self.clone(), id }
    }

    fn record(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        needs_grad: bool,
        op: Op<T>,
    ) -> Result<Var<T>> {
        if !T::all_finite(&data) {
            return Err(Error::NonFinite { op: op_name, node: self.node_count() });
        }
        Ok(self.push(shape, data, needs_grad, op))
    }

    /// Concatenate along `axis`. All inputs must share the other dims.
    pub fn concat(&self, inputs: &[Var<T>], axis: usize) -> Result<Var<T>> {
        if inputs.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let inner = self.inner.borrow();
        let first = &inner.nodes[inputs[0].id].shape;
        if axis >= first.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} out of range for {}", shape_str(first)),
            });
        }
        let mut axis_total = 0;
        for v in inputs {
            let s = &inner.nodes[v.id].shape;
            if s.len() != first.len()
                || s.iter().zip(first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{} vs {}", shape_str(s), shape_str(first)),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let out_inner = axis_total * tail;
        let mut data = vec![T::zero(); outer * out_inner];
        let mut off = 0;
        for v in inputs {
            let n = &inner.nodes[v.id];
            let in_inner = n.shape[axis] * tail;
            for o in 0..outer {
                let src = &n.data[o * in_inner..(o + 1) * in_inner];
                data[o * out_inner + off..o * out_inner + off + in_inner].copy_from_slice(src);
            }
            off += in_inner;
        }
        let needs = inputs.iter().any(|v| inner.nodes[v.id].needs_grad);
        drop(inner);
        self.record(
            "concat",
            out_shape,
            data,
            needs,
            Op::Concat { inputs: inputs.iter().map(|v| v.id).collect(), axis },
        )
    }

    /// Reverse pass from a scalar loss. Fills node gradients and
    /// accumulates into the shared parameters behind leaves.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes[loss.id].data.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {}",
                shape_str(&inner.nodes[loss.id].shape)
            )));
        }
        if !inner.nodes[loss.id].needs_grad {
            return Ok(());
        }
        let n = loss.id + 1;
        // Gradients allocate lazily on first contribution; nodes the loss
        // does not reach keep an empty buffer (semantically zero).
        for node in inner.nodes[..n].iter_mut() {
            node.grad = Vec::new();
        }
        inner.nodes[loss.id].grad = vec![T::one()];

        for i in (0..n).rev() {
            if !inner.nodes[i].needs_grad || inner.nodes[i].grad.is_empty() {
                continue;
            }
            let gout = std::mem::take(&mut inner.nodes[i].grad);
            let mut contribs: Vec<(usize, Vec<T>)> = Vec::new();
            {
                let nodes = &inner.nodes;
                let node = &nodes[i];
                match &node.op {
                    Op::Leaf { param } => {
                        if let Some(p) = param {
                            p.borrow_mut().accumulate_grad(&gout);
                        }
                    }
                    Op::Add { a, b } => {
                        if nodes[*a].needs_grad {
                            contribs.push((*a, gout.clone()));
                        }
                        if nodes[*b].needs_grad {
                            contribs.push((*b, reduce_to(&gout, nodes[*b].data.len())));
                        }
                    }
                    Op::Sub { a, b } => {
                        if nodes[*a].needs_grad {
                            contribs.push((*a, gout.clone()));
                        }
                        if nodes[*b].needs_grad {
                            let neg: Vec<T> = gout.iter().map(|&g| -g).collect();
                            contribs.push((*b, reduce_to(&neg, nodes[*b].data.len())));
                        }
                    }
                    Op::Mul { a, b } => {
                        let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
                        if nodes[*a].needs_grad {
                            let da = gout
                                .iter()
                                .enumerate()
                                .map(|(j, &g)| g * bd[j % bd.len()])
                                .collect();
                            contribs.push((*a, da));
                        }
                        if nodes[*b].needs_grad {
                            let full: Vec<T> =
                                gout.iter().zip(ad).map(|(&g, &x)| g * x).collect();
                            contribs.push((*b, reduce_to(&full, bd.len())));
                        }
                    }
                    Op::AddScalar { a } => {
                        if nodes[*a].needs_grad {
                            contribs.push((*a, gout.clone()));
                        }
                    }
                    Op::MulScalar { a, s } => {
                        if nodes[*a].needs_grad {
                            contribs.push((*a, gout.iter().map(|&g| g * *s).collect()));
                        }
                    }
                    Op::Matmul { a, b, batch, m, k, n, b_shared } => {
                        let (m, k, n, batch) = (*m, *k, *n, *batch);
                        let ad = &nodes[*a].data;
                        let bd = &nodes[*b].data;
                        if *b_shared {
                            if nodes[*a].needs_grad {
                                let bt = transpose2d(bd, k, n);
                                contribs.push((*a, matmul_rows(&gout, &bt, m, n, k)));
                            }
                            if nodes[*b].needs_grad {
                                let at = transpose2d(ad, m, k);
                                contribs.push((*b, matmul_rows(&at, &gout, k, m, n)));
                            }
                        } else {
                            if nodes[*a].needs_grad {
                                let mut bt = vec![T::zero(); batch * n * k];
                                for i in 0..batch {
                                    bt[i * n * k..(i + 1) * n * k]
                                        .copy_from_slice(&transpose2d(&bd[i * k * n..(i + 1) * k * n], k, n));
                                }
                                contribs.push((*a, matmul_batched(&gout, &bt, batch, m, n, k)));
                            }
                            if nodes[*b].needs_grad {
                                let mut at = vec![T::zero(); batch * k * m];
                                for i in 0..batch {
                                    at[i * k * m..(i + 1) * k * m]
                                        .copy_from_slice(&transpose2d(&ad[i * m * k..(i + 1) * m * k], m, k));
                                }
                                contribs.push((*b, matmul_batched(&at, &gout, batch, k, m, n)));
                            }
                        }
                    }
                    Op::SwapAxes { a, ax0, ax1 } => {
                        if nodes[*a].needs_grad {
                            let (g, _) = swap_axes_raw(&gout, &node.shape, *ax0, *ax1);
                            contribs.push((*a, g));
                        }
                    }
                    Op::Reshape { a } => {
                        if nodes[*a].needs_grad {
                            contribs.push((*a, gout.clone()));
                        }
                    }
                    Op::Slice { a, axis, start } => {
                        if nodes[*a].needs_grad {
                            let src_shape = &nodes[*a].shape;
                            let tail: usize = src_shape[axis + 1..].iter().product();
                            let outer: usize = src_shape[..*axis].iter().product();
                            let src_inner = src_shape[*axis] * tail;
                            let len = node.shape[*axis];
                            let dst_inner = len * tail;
                            let mut g = vec![T::zero(); nodes[*a].data.len()];
                            for o in 0..outer {
                                let dst = &mut g[o * src_inner + start * tail
                                    ..o * src_inner + (start + len) * tail];
                                dst.copy_from_slice(&gout[o * dst_inner..(o + 1) * dst_inner]);
                            }
                            contribs.push((*a, g));
                        }
                    }
                    Op::Concat { inputs, axis } => {
                        let tail: usize = node.shape[axis + 1..].iter().product();
                        let outer: usize = node.shape[..*axis].iter().product();
                        let out_inner = node.shape[*axis] * tail;
                        let mut off = 0;
                        for &inp in inputs {
                            let in_inner = nodes[inp].shape[*axis] * tail;
                            if nodes[inp].needs_grad {
                                let mut g = vec![T::zero(); nodes[inp].data.len()];
                                for o in 0..outer {
                                    g[o * in_inner..(o + 1) * in_inner].copy_from_slice(
                                        &gout[o * out_inner + off..o * out_inner + off + in_inner],
                                    );
                                }
                                contribs.push((inp, g));
                            }
                            off += in_inner;
                        }
                    }
                    Op::SoftmaxLast { a } => {
                        if nodes[*a].needs_grad {
                            let cols = *node.shape.last().unwrap();
                            let y = &node.data;
                            let rows = y.len() / cols;
                            let per_row = |r: usize, out: &mut [T]| {
                                let yr = &y[r * cols..(r + 1) * cols];
                                let gr = &gout[r * cols..(r + 1) * cols];
                                let mut dot = T::zero();
                                for j in 0..cols {
                                    dot = dot + yr[j] * gr[j];
                                }
                                for j in 0..cols {
                                    out[j] = yr[j] * (gr[j] - dot);
                                }
                            };
                            let mut g = vec![T::zero(); y.len()];
                            if rows >= PAR_ROWS {
                                g.par_chunks_mut(cols).enumerate().for_each(|(r, o)| per_row(r, o));
                            } else {
                                for (r, o) in g.chunks_exact_mut(cols).enumerate() {
                                    per_row(r, o);
                                }
                            }
                            contribs.push((*a, g));
                        }
                    }
                    Op::CausalSoftmax { a, scale } => {
                        if nodes[*a].needs_grad {
                            let seq = *node.shape.last().unwrap();
                            let y = &node.data;
                            let rows = y.len() / seq;
                            let scale = *scale;
                            let per_row = |r: usize, out: &mut [T]| {
                                let i = r % seq;
                                let yr = &y[r * seq..(r + 1) * seq];
                                let gr = &gout[r * seq..(r + 1) * seq];
                                let mut dot = T::zero();
                                for j in 0..i + 1 {
                                    dot = dot + yr[j] * gr[j];
                                }
                                for j in 0..i + 1 {
                                    out[j] = scale * yr[j] * (gr[j] - dot);
                                }
                            };
                            let mut g = vec![T::zero(); y.len()];
                            if rows >= PAR_ROWS {
                                g.par_chunks_mut(seq).enumerate().for_each(|(r, o)| per_row(r, o));
                            } else {
                                for (r, o) in g.chunks_exact_mut(seq).enumerate() {
                                    per_row(r, o);
                                }
                            }
                            contribs.push((*a, g));
                        }
                    }
                    Op::LogSoftmaxLast { a } => {
                        if nodes[*a].needs_grad {
                            let cols = *node.shape.last().unwrap();
                            let y = &node.data;
                            let rows = y.len() / cols;
                            let per_row = |r: usize, out: &mut [T]| {
                                let yr = &y[r * cols..(r + 1) * cols];
                                let gr = &gout[r * cols..(r + 1) * cols];
                                let mut gsum = T::zero();
                                for &gv in gr {
                                    gsum = gsum + gv;
                                }
                                for j in 0..cols {
                                    out[j] = gr[j] - yr[j].exp() * gsum;
                                }
                            };
                            let mut g = vec![T::zero(); y.len()];
                            if rows >= PAR_ROWS {
                                g.par_chunks_mut(cols).enumerate().for_each(|(r, o)| per_row(r, o));
                            } else {
                                for (r, o) in g.chunks_exact_mut(cols).enumerate() {
                                    per_row(r, o);
                                }
                            }
                            contribs.push((*a, g));
                        }
                    }
                    Op::Log { a } => {
                        if nodes[*a].needs_grad {
                            let x = &nodes[*a].data;
                            contribs.push((*a, gout.iter().zip(x).map(|(&g, &v)| g / v).collect()));
                        }
                    }
                    Op::Exp { a } => {
                        if nodes[*a].needs_grad {
                            let y = &node.data;
                            contribs.push((*a, gout.iter().zip(y).map(|(&g, &v)| g * v).collect()));
                        }
                    }
                    Op::Sqrt { a } => {
                        if nodes[*a].needs_grad {
                            let y = &node.data;
                            let two = T::from_f64(2.0);
                            contribs
                                .push((*a, gout.iter().zip(y).map(|(&g, &v)| g / (two * v)).collect()));
                        }
                    }
                    Op::Sigmoid { a } => {
                        if nodes[*a].needs_grad {
                            let y = &node.data;
                            contribs.push((
                                *a,
                                gout.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
                            ));
                        }
                    }
                    Op::Silu { a } => {
                        if nodes[*a].needs_grad {
                            let x = &nodes[*a].data;
                            let g = elementwise2(&gout, x, |g, v| {
                                let s = T::one() / (T::one() + (-v).exp());
                                g * s * (T::one() + v * (T::one() - s))
                            });
                            contribs.push((*a, g));
                        }
                    }
                    Op::Mean { a } => {
                        if nodes[*a].needs_grad {
                            let n_in = nodes[*a].data.len();
                            let g = gout[0] / T::from_f64(n_in as f64);
                            contribs.push((*a, vec![g; n_in]));
                        }
                    }
                    Op::Sum { a } => {
                        if nodes[*a].needs_grad {
                            contribs.push((*a, vec![gout[0]; nodes[*a].data.len()]));
                        }
                    }
                    Op::RmsNorm { x, w, rstd } => {
                        let d = *node.shape.last().unwrap();
                        let xd = &nodes[*x].data;
                        let wd = &nodes[*w].data;
                        let rows = xd.len() / d;
                        let dn = T::from_f64(d as f64);
                        if nodes[*x].needs_grad {
                            let mut gx = vec![T::zero(); xd.len()];
                            for r in 0..rows {
                                let rs = rstd[r];
                                let xr = &xd[r * d..(r + 1) * d];
                                let gr = &gout[r * d..(r + 1) * d];
                                let mut dot = T::zero();
                                for j in 0..d {
                                    dot = dot + gr[j] * wd[j] * xr[j];
                                }
                                let coef = rs * rs * rs * dot / dn;
                                let out = &mut gx[r * d..(r + 1) * d];
                                for j in 0..d {
                                    out[j] = rs * gr[j] * wd[j] - coef * xr[j];
                                }
                            }
                            contribs.push((*x, gx));
                        }
                        if nodes[*w].needs_grad {
                            let mut gw = vec![T::zero(); d];
                            for r in 0..rows {
                                let rs = rstd[r];
                                let xr = &xd[r * d..(r + 1) * d];
                                let gr = &gout[r * d..(r + 1) * d];
                                for j in 0..d {
                                    gw[j] = gw[j] + gr[j] * xr[j] * rs;
                                }
                            }
                            contribs.push((*w, gw));
                        }
                    }
                    Op::Rope { a, cos, sin } => {
                        if nodes[*a].needs_grad {
                            let g = rope_raw(&gout, &node.shape, cos, sin, true);
                            contribs.push((*a, g));
                        }
                    }
                    Op::Embedding { table, ids } => {
                        if nodes[*table].needs_grad {
                            let dim = *nodes[*table].shape.last().unwrap();
                            let mut g = vec![T::zero(); nodes[*table].data.len()];
                            for (r, &id) in ids.iter().enumerate() {
                                let dst = &mut g[id as usize * dim..(id as usize + 1) * dim];
                                let src = &gout[r * dim..(r + 1) * dim];
                                for j in 0..dim {
                                    dst[j] = dst[j] + src[j];
                                }
                            }
                            contribs.push((*table, g));
                        }
                    }
                    Op::MaskedFill { a, mask } => {
                        if nodes[*a].needs_grad {
                            let g = gout
                                .iter()
                                .zip(mask.iter())
                                .map(|(&g, &m)| if m { T::zero() } else { g })
                                .collect();
                            contribs.push((*a, g));
                        }
                    }
                    Op::GatherLast { a, ids } => {
                        if nodes[*a].needs_grad {
                            let cols = *nodes[*a].shape.last().unwrap();
                            let mut g = vec![T::zero(); nodes[*a].data.len()];
                            for (r, &id) in ids.iter().enumerate() {
                                g[r * cols + id as usize] = g[r * cols + id as usize] + gout[r];
                            }
                            contribs.push((*a, g));
                        }
                    }
                    Op::PassThrough { a, mask } => {
                        if nodes[*a].needs_grad {
                            contribs
                                .push((*a, gout.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect()));
                        }
                    }
                }
            }
            for (idx, c) in contribs {
                let dst = &mut inner.nodes[idx].grad;
                if dst.is_empty() {
                    *dst = c;
                } else {
                    debug_assert_eq!(dst.len(), c.len());
                    for (d, s) in dst.iter_mut().zip(&c) {
                        *d = *d + *s;
                    }
                }
            }
            inner.nodes[i].grad = gout;
        }
        Ok(())
    }
}

/// Sum a gradient down to `target_len` by folding the leading repeat
/// dimension (leading-batch broadcast rule).
fn reduce_to<T: Scalar>(g: &[T], target_len: usize) -> Vec<T> {
    if g.len() == target_len {
        return g.to_vec();
    }
    debug_assert_eq!(g.len() % target_len, 0);
    let mut out = vec![T::zero(); target_len];
    for (i, &v) in g.iter().enumerate() {
        let j = i % target_len;
        out[j] = out[j] + v;
    }
    out
}

fn swap_axes_raw<T: Scalar>(
    data: &[T],
    shape: &[usize],
    ax0: usize,
    ax1: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let (lo, hi) = (ax0.min(ax1), ax0.max(ax1));
    // Contiguous-run fast path: swapping two axes with everything after
    // `hi` forming a fixed-size inner block.
    let outer: usize = shape[..lo].iter().product();
    let d0 = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let d1 = shape[hi];
    let inner: usize = shape[hi + 1..].iter().product();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i0 in 0..d0 {
            for m in 0..mid {
                for i1 in 0..d1 {
                    let src = (((o * d0 + i0) * mid + m) * d1 + i1) * inner;
                    let dst = (((o * d1 + i1) * mid + m) * d0 + i0) * inner;
                    out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    (out, out_shape)
}

/// Pairwise rotation on [batch, heads, seq, head_dim]; `invert` applies
/// the transpose rotation (used for the backward pass).
fn rope_raw<T: Scalar>(
    data: &[T],
    shape: &[usize],
    cos: &[T],
    sin: &[T],
    invert: bool,
) -> Vec<T> {
    let (b, h, s, hd) = (shape[0], shape[1], shape[2], shape[3]);
    let half = hd / 2;
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..b * h {
        for t in 0..s {
            let base = (bi * s + t) * hd;
            for i in 0..half {
                let c = cos[t * half + i];
                let sn = if invert { -sin[t * half + i] } else { sin[t * half + i] };
                let x = data[base + 2 * i];
                let y = data[base + 2 * i + 1];
                out[base + 2 * i] = x * c - y * sn;
                out[base + 2 * i + 1] = x * sn + y * c;
            }
        }
    }
    out
}

impl<T: Scalar> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> Tape<T> {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn value(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        Tensor::from_vec(n.shape.clone(), n.data.clone()).expect("node invariant")
    }

    /// Zero-copy read of the node's value.
    pub fn map_value<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].data)
    }

    /// Zero-copy read of the node's gradient (empty before backward).
    pub fn map_grad<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].grad)
    }

    pub fn item(&self) -> T {
        let inner = self.tape.inner.borrow();
        debug_assert_eq!(inner.nodes[self.id].data.len(), 1);
        inner.nodes[self.id].data[0]
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }

    fn binary_shapes(&self, rhs: &Var<T>, op: &'static str) -> Result<(Vec<usize>, bool)> {
        let inner = self.tape.inner.borrow();
        let (sa, sb) = (&inner.nodes[self.id].shape, &inner.nodes[rhs.id].shape);
        if sa == sb {
            return Ok((sa.clone(), false));
        }
        // Leading-batch broadcast: rhs shape must be a suffix of lhs shape.
        if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            return Ok((sa.clone(), true));
        }
        Err(Error::ShapeMismatch {
            op,
            detail: format!("{} vs {}", shape_str(sa), shape_str(sb)),
        })
    }

    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (shape, bcast) = self.binary_shapes(rhs, "add")?;
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id].data, &inner.nodes[rhs.id].data);
        let data: Vec<T> = if bcast {
            a.iter().enumerate().map(|(i, &x)| x + b[i % b.len()]).collect()
        } else {
            elementwise2(a, b, |x, y| x + y)
        };
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        self.tape.record("add", shape, data, needs, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (shape, bcast) = self.binary_shapes(rhs, "sub")?;
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id].data, &inner.nodes[rhs.id].data);
        let data: Vec<T> = if bcast {
            a.iter().enumerate().map(|(i, &x)| x - b[i % b.len()]).collect()
        } else {
            elementwise2(a, b, |x, y| x - y)
        };
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        self.tape.record("sub", shape, data, needs, Op::Sub { a: self.id, b: rhs.id })
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (shape, bcast) = self.binary_shapes(rhs, "mul")?;
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id].data, &inner.nodes[rhs.id].data);
        let data: Vec<T> = if bcast {
            a.iter().enumerate().map(|(i, &x)| x * b[i % b.len()]).collect()
        } else {
            elementwise2(a, b, |x, y| x * y)
        };
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        drop(inner);
        self.tape.record("mul", shape, data, needs, Op::Mul { a: self.id, b: rhs.id })
    }

    pub fn add_scalar(&self, s: T) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let data = elementwise(&n.data, |x| x + s);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(inner);
        self.tape.record("add_scalar", shape, data, needs, Op::AddScalar { a: self.id })
    }

    pub fn mul_scalar(&self, s: T) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let data = elementwise(&n.data, |x| x * s);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(inner);
        self.tape.record("mul_scalar", shape, data, needs, Op::MulScalar { a: self.id, s })
    }

    /// Matrix product. rhs of rank 2 is shared across the flattened
    /// leading rows of self; higher-rank rhs must match leading dims.
    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let (sa, sb) = (&inner.nodes[self.id].shape, &inner.nodes[rhs.id].shape);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("rank too low: {} x {}", shape_str(sa), shape_str(sb)),
            });
        }
        let k = sa[sa.len() - 1];
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad;
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{} x {}", shape_str(sa), shape_str(sb)),
                });
            }
            let n = sb[1];
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let data = matmul_rows(&inner.nodes[self.id].data, &inner.nodes[rhs.id].data, rows, k, n);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            drop(inner);
            self.tape.record(
                "matmul",
                shape,
                data,
                needs,
                Op::Matmul { a: self.id, b: rhs.id, batch: 1, m: rows, k, n, b_shared: true },
            )
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sb[sb.len() - 2] != k
            {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{} x {}", shape_str(sa), shape_str(sb)),
                });
            }
            let m = sa[sa.len() - 2];
            let n = sb[sb.len() - 1];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let data =
                matmul_batched(&inner.nodes[self.id].data, &inner.nodes[rhs.id].data, batch, m, k, n);
            let mut shape = sa[..sa.len() - 2].to_vec();
            shape.push(m);
            shape.push(n);
            drop(inner);
            self.tape.record(
                "matmul",
                shape,
                data,
                needs,
                Op::Matmul { a: self.id, b: rhs.id, batch, m, k, n, b_shared: false },
            )
        }
    }

    pub fn swap_axes(&self, ax0: usize, ax1: usize) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if ax0 >= n.shape.len() || ax1 >= n.shape.len() {
            return Err(Error::ShapeMismatch {
                op: "swap_axes",
                detail: format!("axes ({ax0},{ax1}) out of range for {}", shape_str(&n.shape)),
            });
        }
        let (data, shape) = swap_axes_raw(&n.data, &n.shape, ax0, ax1);
        let needs = n.needs_grad;
        drop(inner);
        self.tape.record("swap_axes", shape, data, needs, Op::SwapAxes { a: self.id, ax0, ax1 })
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let want: usize = new_shape.iter().product();
        if want != n.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{} -> {}", shape_str(&n.shape), shape_str(&new_shape)),
            });
        }
        let (data, needs) = (n.data.clone(), n.needs_grad);
        drop(inner);
        self.tape.record("reshape", new_shape, data, needs, Op::Reshape { a: self.id })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if axis >= n.shape.len() || start + len > n.shape[axis] || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!(
                    "range {start}..{} on axis {axis} of {}",
                    start + len,
                    shape_str(&n.shape)
                ),
            });
        }
        let tail: usize = n.shape[axis + 1..].iter().product();
        let outer: usize = n.shape[..axis].iter().product();
        let src_inner = n.shape[axis] * tail;
        let dst_inner = len * tail;
        let mut data = vec![T::zero(); outer * dst_inner];
        for o in 0..outer {
            data[o * dst_inner..(o + 1) * dst_inner].copy_from_slice(
                &n.data[o * src_inner + start * tail..o * src_inner + (start + len) * tail],
            );
        }
        let mut shape = n.shape.clone();
        shape[axis] = len;
        let needs = n.needs_grad;
        drop(inner);
        self.tape.record("slice", shape, data, needs, Op::Slice { a: self.id, axis, start })
    }

    pub fn softmax_last(&self) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let cols = *n.shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "softmax",
            detail: "rank-0 input".into(),
        })?;
        let data = softmax_rows(&n.data, cols);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(inner);
        self.tape.record("softmax", shape, data, needs, Op::SoftmaxLast { a: self.id })
    }

    /// Fused causal attention probabilities: softmax(scale * x) where
    /// row i of each [seq, seq] score block sees only columns j <= i;
    /// the rest are exactly zero. Input shape [b, h, s, s].
    pub fn causal_softmax(&self, scale: T) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if n.shape.len() != 4 || n.shape[2] != n.shape[3] {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                detail: format!("want square [b,h,s,s] scores, got {}", shape_str(&n.shape)),
            });
        }
        let seq = n.shape[3];
        let data = causal_softmax_rows(&n.data, seq, scale);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(inner);
        self.tape.record("causal_softmax", shape, data, needs, Op::CausalSoftmax { a: self.id, scale })
    }

    pub fn log_softmax_last(&self) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let cols = *n.shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "log_softmax",
            detail: "rank-0 input".into(),
        })?;
        let data = log_softmax_rows(&n.data, cols);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(inner);
        self.tape.record("log_softmax", shape, data, needs, Op::LogSoftmaxLast { a: self.id })
    }

    pub fn log(&self) -> Result<Var<T>> {
        self.unary("log", |x| x.ln(), |id| Op::Log { a: id })
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary("exp", |x| x.exp(), |id| Op::Exp { a: id })
    }

    pub fn sqrt(&self) -> Result<Var<T>> {
        self.unary("sqrt", |x| x.sqrt(), |id| Op::Sqrt { a: id })
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.unary("sigmoid", |x| T::one() / (T::one() + (-x).exp()), |id| Op::Sigmoid { a: id })
    }

    pub fn silu(&self) -> Result<Var<T>> {
        self.unary("silu", |x| x / (T::one() + (-x).exp()), |id| Op::Silu { a: id })
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T + Sync,
        op: impl FnOnce(usize) -> Op<T>,
    ) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let data = elementwise(&n.data, f);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(inner);
        self.tape.record(name, shape, data, needs, op(self.id))
    }

    /// Mean over all elements, producing a scalar node.
    pub fn mean_all(&self) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let mut s = T::zero();
        for &v in &n.data {
            s = s + v;
        }
        let data = vec![s / T::from_f64(n.data.len() as f64)];
        let needs = n.needs_grad;
        drop(inner);
        self.tape.record("mean", vec![1], data, needs, Op::Mean { a: self.id })
    }

    /// Sum over all elements, producing a scalar node.
    pub fn sum_all(&self) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let mut s = T::zero();
        for &v in &n.data {
            s = s + v;
        }
        let needs = n.needs_grad;
        drop(inner);
        self.tape.record("sum", vec![1], vec![s], needs, Op::Sum { a: self.id })
    }

    /// x / sqrt(mean(x^2) + eps) * w over the last axis.
    pub fn rmsnorm(&self, weight: &Var<T>, eps: T) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let w = &inner.nodes[weight.id];
        let d = *n.shape.last().unwrap_or(&0);
        if w.shape != [d] || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                detail: format!("x {} weight {}", shape_str(&n.shape), shape_str(&w.shape)),
            });
        }
        let rows = n.data.len() / d;
        let dn = T::from_f64(d as f64);
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); n.data.len()];
        for r in 0..rows {
            let xr = &n.data[r * d..(r + 1) * d];
            let mut ss = T::zero();
            for &v in xr {
                ss = ss + v * v;
            }
            let rs = T::one() / (ss / dn + eps).sqrt();
            rstd[r] = rs;
            let out = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = xr[j] * rs * w.data[j];
            }
        }
        let (shape, needs) = (n.shape.clone(), n.needs_grad || w.needs_grad);
        drop(inner);
        self.tape.record("rmsnorm", shape, data, needs, Op::RmsNorm { x: self.id, w: weight.id, rstd })
    }

    /// Rotary position embedding over [batch, heads, seq, head_dim],
    /// rotating adjacent pairs with angle pos * base^(-2i/head_dim).
    pub fn rope(&self, base: f64) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if n.shape.len() != 4 || n.shape[3] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "rope",
                detail: format!("want [b,h,s,even head_dim], got {}", shape_str(&n.shape)),
            });
        }
        let (s, hd) = (n.shape[2], n.shape[3]);
        let half = hd / 2;
        let mut cos = vec![T::zero(); s * half];
        let mut sin = vec![T::zero(); s * half];
        for t in 0..s {
            for i in 0..half {
                let theta = t as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                cos[t * half + i] = T::from_f64(theta.cos());
                sin[t * half + i] = T::from_f64(theta.sin());
            }
        }
        let cos = Arc::new(cos);
        let sin = Arc::new(sin);
        let data = rope_raw(&n.data, &n.shape, &cos, &sin, false);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(inner);
        self.tape.record("rope", shape, data, needs, Op::Rope { a: self.id, cos, sin })
    }

    /// Lookup rows of self (the table, [vocab, dim]) producing
    /// prefix_shape + [dim].
    pub fn embedding(&self, ids: &[u32], prefix_shape: &[usize]) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if n.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                detail: format!("table must be rank 2, got {}", shape_str(&n.shape)),
            });
        }
        let (vocab, dim) = (n.shape[0], n.shape[1]);
        let rows: usize = prefix_shape.iter().product();
        if rows != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                detail: format!("{} ids vs prefix {}", ids.len(), shape_str(prefix_shape)),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Invalid(format!("token id {bad} out of range (vocab {vocab})")));
        }
        let mut data = vec![T::zero(); rows * dim];
        for (r, &id) in ids.iter().enumerate() {
            data[r * dim..(r + 1) * dim]
                .copy_from_slice(&n.data[id as usize * dim..(id as usize + 1) * dim]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(dim);
        let needs = n.needs_grad;
        drop(inner);
        self.tape.record(
            "embedding",
            shape,
            data,
            needs,
            Op::Embedding { table: self.id, ids: Arc::new(ids.to_vec()) },
        )
    }

    /// Replace elements where mask is true with `fill`.
    pub fn masked_fill(&self, mask: Arc<Vec<bool>>, fill: T) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if mask.len() != n.data.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                detail: format!("mask len {} vs {}", mask.len(), shape_str(&n.shape)),
            });
        }
        let data: Vec<T> =
            n.data.iter().zip(mask.iter()).map(|(&x, &m)| if m { fill } else { x }).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(inner);
        self.tape.record("masked_fill", shape, data, needs, Op::MaskedFill { a: self.id, mask })
    }

    /// Pick index `ids[r]` from each row of the last axis.
    pub fn gather_last(&self, ids: &[u32]) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        let cols = *n.shape.last().unwrap_or(&0);
        if cols == 0 || n.shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_last",
                detail: format!("need rank >= 2, got {}", shape_str(&n.shape)),
            });
        }
        let rows = n.data.len() / cols;
        if ids.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "gather_last",
                detail: format!("{} ids vs {} rows", ids.len(), rows),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cols) {
            return Err(Error::Invalid(format!("gather index {bad} out of range ({cols})")));
        }
        let data: Vec<T> = ids.iter().enumerate().map(|(r, &id)| n.data[r * cols + id as usize]).collect();
        let shape = n.shape[..n.shape.len() - 1].to_vec();
        let needs = n.needs_grad;
        drop(inner);
        self.tape.record(
            "gather_last",
            shape,
            data,
            needs,
            Op::GatherLast { a: self.id, ids: Arc::new(ids.to_vec()) },
        )
    }

    /// Record an op whose forward value was produced outside the tape and
    /// whose backward multiplies the upstream gradient by `grad_mask`.
    pub fn pass_through(&self, value: Tensor<T>, grad_mask: Vec<T>) -> Result<Var<T>> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        if value.shape() != n.shape || grad_mask.len() != n.data.len() {
            return Err(Error::ShapeMismatch {
                op: "pass_through",
                detail: format!("{} vs {}", shape_str(value.shape()), shape_str(&n.shape)),
            });
        }
        let needs = n.needs_grad;
        let shape = n.shape.clone();
        drop(inner);
        let Tensor { data, .. } = value;
        self.tape.record(
            "pass_through",
            shape,
            data,
            needs,
            Op::PassThrough { a: self.id, mask: Arc::new(grad_mask) },
        )
    }
}
