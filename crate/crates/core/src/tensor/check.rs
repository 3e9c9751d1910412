//! Central finite-difference gradient oracle.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// Returns the maximum over sampled coordinates of
/// |analytic - central| / max(1, |central|). At most `max_coords`
/// coordinates are checked (all of them when the tensor is small).
pub fn finite_difference_check<T, F>(
    f: F,
    x: &Tensor<T>,
    epsilon: T,
    max_coords: usize,
    seed: u64,
) -> Result<T>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Var<T>) -> Result<Var<T>>,
{
    if epsilon <= T::zero() {
        return Err(Error::Invalid("epsilon must be positive".into()));
    }
    let eval = |t: &Tensor<T>| -> Result<T> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&tape, &v)?;
        let val = out.item();
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check", node: out.id() });
        }
        Ok(val)
    };

    // Analytic gradient from one recorded forward + backward.
    let param = super::shared(x.clone().requires_grad(true));
    let tape = Tape::new();
    let leaf = tape.leaf(&param);
    let out = f(&tape, &leaf)?;
    out.backward()?;
    let analytic = param.borrow().grad.clone().expect("leaf grad");

    let n = x.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = Rng::new(seed);
        (0..max_coords).map(|_| rng.below(n)).collect()
    };

    let mut worst = T::zero();
    let mut probe = x.clone();
    for &c in &coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + epsilon;
        let up = eval(&probe)?;
        probe.data_mut()[c] = orig - epsilon;
        let down = eval(&probe)?;
        probe.data_mut()[c] = orig;
        let central = (up - down) / (T::from_f64(2.0) * epsilon);
        let denom = T::one().max(central.abs());
        let rel = (analytic[c] - central).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = finite_difference_check(
            |_, v| v.sum_all(),
            &x,
            1e-4,
            16,
            0,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn quadratic_within_tolerance() {
        let mut rng = Rng::new(17);
        let x = Tensor::<f64>::rand_uniform(vec![8], -2.0, 2.0, &mut rng);
        let err = finite_difference_check(
            |_, v| v.mul(v)?.sum_all(),
            &x,
            1e-4,
            16,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let x = Tensor::<f64>::zeros(vec![2]);
        assert!(finite_difference_check(|_, v| v.sum_all(), &x, 0.0, 4, 0).is_err());
    }
}
