//! Dense row-major tensors and a tape-based reverse-mode autodiff
//! engine. f32 is the training width; the same code instantiated at
//! f64 backs the finite-difference gradient suites.

mod check;
mod gemm;
mod tape;

pub use check::finite_difference_check;
pub use gemm::{matmul_batched, matmul_rows};
pub use tape::{log_softmax_rows, Tape, Var};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type of the engine: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Round half to even (banker's rounding).
    fn round_even(self) -> Self;
    /// GEMM over a block of output rows: c[rows, n] = a[rows, k] @ b[k, n].
    fn gemm_rows(a: &[Self], b: &[Self], c: &mut [Self], rows: usize, k: usize, n: usize);
    /// Branchless whole-slice finiteness scan.
    fn all_finite(data: &[Self]) -> bool;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn round_even(self) -> Self {
        f32::round_ties_even(self)
    }
    fn gemm_rows(a: &[f32], b: &[f32], c: &mut [f32], rows: usize, k: usize, n: usize) {
        gemm::gemm_rows_f32(a, b, c, rows, k, n)
    }
    fn all_finite(data: &[f32]) -> bool {
        // Exponent all-ones marks inf/NaN.
        let mut acc = 0u32;
        for &v in data {
            acc |= u32::from(v.to_bits() & 0x7f80_0000 == 0x7f80_0000);
        }
        acc == 0
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn round_even(self) -> Self {
        f64::round_ties_even(self)
    }
    fn gemm_rows(a: &[f64], b: &[f64], c: &mut [f64], rows: usize, k: usize, n: usize) {
        gemm::gemm_rows_scalar(a, b, c, rows, k, n)
    }
    fn all_finite(data: &[f64]) -> bool {
        let mut acc = 0u64;
        for &v in data {
            acc |= u64::from(v.to_bits() & 0x7ff0_0000_0000_0000 == 0x7ff0_0000_0000_0000);
        }
        acc == 0
    }
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(rng.normal() * std)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Uniform init in [lo, hi).
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(rng.uniform(lo, hi))).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Zero the gradient buffer, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    /// Accumulate into the gradient buffer (allocates on first use).
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        self.map(|x| x.to_f64())
    }

    pub fn to_f32_tensor(&self) -> Tensor<f32> {
        self.map(|x| x.to_f64() as f32)
    }
}

/// Shared handle for model parameters: the tape reads values from it at
/// forward time and accumulates gradients back into it after backward.
pub type SharedTensor<T> = Rc<RefCell<Tensor<T>>>;

pub fn shared<T: Scalar>(t: Tensor<T>) -> SharedTensor<T> {
    Rc::new(RefCell::new(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f32>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    }

    #[test]
    fn round_even_is_bankers() {
        assert_eq!(<f32 as Scalar>::round_even(0.5), 0.0);
        assert_eq!(<f32 as Scalar>::round_even(1.5), 2.0);
        assert_eq!(<f32 as Scalar>::round_even(2.5), 2.0);
        assert_eq!(<f32 as Scalar>::round_even(-0.5), 0.0);
        assert_eq!(<f64 as Scalar>::round_even(3.5), 4.0);
    }
}
