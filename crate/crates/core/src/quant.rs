//! Uniform fake quantization: quantize-dequantize on a static affine
//! grid, min-max and MSE range calibration, and the clipped
//! straight-through backward used when training through quantizers.
//!
//! Rounding is half-to-even everywhere. Symmetric-signed uses the grid
//! [-2^(b-1), 2^(b-1)-1] with zero-point 0 and scale maxabs/(2^(b-1)-1);
//! asymmetric uses [0, 2^b - 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Floor applied to degenerate (all-equal) group scales.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    SymmetricSigned,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u8,
    pub symmetry: Symmetry,
    pub granularity: Granularity,
}

impl QuantScheme {
    pub fn new(bits: u8, symmetry: Symmetry, granularity: Granularity) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Quant(format!("bitwidth {bits} outside [2, 16]")));
        }
        Ok(QuantScheme { bits, symmetry, granularity })
    }

    /// Integer grid limits (qmin, qmax).
    pub fn grid(&self) -> (i64, i64) {
        match self.symmetry {
            Symmetry::SymmetricSigned => {
                let half = 1i64 << (self.bits - 1);
                (-half, half - 1)
            }
            Symmetry::Asymmetric => (0, (1i64 << self.bits) - 1),
        }
    }

    /// Number of scale/zero-point groups for a tensor of this shape.
    pub fn group_count(&self, shape: &[usize]) -> Result<usize> {
        match self.granularity {
            Granularity::PerTensor => Ok(1),
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() {
                    return Err(Error::Quant(format!(
                        "per-channel axis {axis} out of range for shape {shape:?}"
                    )));
                }
                Ok(shape[axis])
            }
        }
    }
}

/// Affine grid parameters, one entry per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f32>,
    pub zero_point: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub scheme: QuantScheme,
    pub params: QuantParams,
    pub enabled: bool,
    pub frozen: bool,
}

impl QuantizerState {
    pub fn new(scheme: QuantScheme, params: QuantParams) -> Self {
        QuantizerState { scheme, params, enabled: true, frozen: false }
    }
}

/// Group layout of a tensor: element i belongs to group
/// (i / tail) % groups; equivalently the data decomposes into
/// outer x groups x tail blocks.
#[derive(Debug, Clone, Copy)]
struct GroupLayout {
    outer: usize,
    groups: usize,
    tail: usize,
}

impl GroupLayout {
    fn of(shape: &[usize], numel: usize, scheme: &QuantScheme) -> Result<GroupLayout> {
        let groups = scheme.group_count(shape)?;
        let tail = match scheme.granularity {
            Granularity::PerTensor => numel,
            Granularity::PerChannel { axis } => shape[axis + 1..].iter().product(),
        };
        Ok(GroupLayout { outer: numel / (groups * tail), groups, tail })
    }
}

fn validate<T: Scalar>(
    x: &Tensor<T>,
    scheme: &QuantScheme,
    params: &QuantParams,
) -> Result<GroupLayout> {
    let layout = GroupLayout::of(x.shape(), x.numel(), scheme)?;
    if params.scale.len() != layout.groups || params.zero_point.len() != layout.groups {
        return Err(Error::Quant(format!(
            "params have {} groups, tensor {:?} wants {}",
            params.scale.len(),
            x.shape(),
            layout.groups
        )));
    }
    if let Some(s) = params.scale.iter().find(|&&s| s <= 0.0) {
        return Err(Error::Quant(format!("scale {s} must be positive")));
    }
    let (qmin, qmax) = scheme.grid();
    for &z in &params.zero_point {
        let ok = match scheme.symmetry {
            Symmetry::SymmetricSigned => z == 0,
            Symmetry::Asymmetric => (z as i64) >= qmin && (z as i64) <= qmax,
        };
        if !ok {
            return Err(Error::Quant(format!("zero point {z} invalid for {:?}", scheme.symmetry)));
        }
    }
    Ok(layout)
}

#[inline]
fn qdq_one<T: Scalar>(x: T, s: T, z: T, qmin: T, qmax: T) -> T {
    let q = (x / s).round_even() + z;
    let qc = q.max(qmin).min(qmax);
    s * (qc - z)
}

/// Fake quantization: map every value onto the affine grid and back.
pub fn quantize_dequantize<T: Scalar>(x: &Tensor<T>, state: &QuantizerState) -> Result<Tensor<T>> {
    let layout = validate(x, &state.scheme, &state.params)?;
    let (qmin_i, qmax_i) = state.scheme.grid();
    let (qmin, qmax) = (T::from_f64(qmin_i as f64), T::from_f64(qmax_i as f64));
    let mut out = x.clone();
    out.requires_grad = false;
    out.grad = None;
    let data = out.data_mut();
    for o in 0..layout.outer {
        for g in 0..layout.groups {
            let s = T::from_f64(state.params.scale[g] as f64);
            let z = T::from_f64(state.params.zero_point[g] as f64);
            let base = (o * layout.groups + g) * layout.tail;
            for v in &mut data[base..base + layout.tail] {
                *v = qdq_one(*v, s, z, qmin, qmax);
            }
        }
    }
    Ok(out)
}

/// Straight-through mask: 1 where the pre-clamp code round(x/s) + z lies
/// inside [qmin, qmax], 0 elsewhere.
pub fn ste_mask<T: Scalar>(x: &Tensor<T>, state: &QuantizerState) -> Result<Vec<T>> {
    let layout = validate(x, &state.scheme, &state.params)?;
    let (qmin_i, qmax_i) = state.scheme.grid();
    let (qmin, qmax) = (T::from_f64(qmin_i as f64), T::from_f64(qmax_i as f64));
    let data = x.data();
    let mut mask = vec![T::zero(); data.len()];
    for o in 0..layout.outer {
        for g in 0..layout.groups {
            let s = T::from_f64(state.params.scale[g] as f64);
            let z = T::from_f64(state.params.zero_point[g] as f64);
            let base = (o * layout.groups + g) * layout.tail;
            for i in base..base + layout.tail {
                let q = (data[i] / s).round_even() + z;
                if q >= qmin && q <= qmax {
                    mask[i] = T::one();
                }
            }
        }
    }
    Ok(mask)
}

/// Clipped straight-through backward: upstream gradient where the input
/// landed inside the grid before clamping, zero where it was clipped.
pub fn ste_backward<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    state: &QuantizerState,
) -> Result<Tensor<T>> {
    if upstream.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "ste_backward",
            detail: format!("{:?} vs {:?}", upstream.shape(), x.shape()),
        });
    }
    let mask = ste_mask(x, state)?;
    let data = upstream.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Record fake quantization on the tape: quantize-dequantize forward,
/// straight-through (clipped) backward. Disabled quantizers are the
/// identity.
pub fn fake_quant_var<T: Scalar>(x: &Var<T>, state: &QuantizerState) -> Result<Var<T>> {
    if !state.enabled {
        return Ok(x.clone());
    }
    let value = x.value();
    let y = quantize_dequantize(&value, state)?;
    let mask = ste_mask(&value, state)?;
    x.pass_through(y, mask)
}

fn group_stats<T: Scalar>(
    w: &Tensor<T>,
    scheme: &QuantScheme,
) -> Result<(GroupLayout, Vec<f64>, Vec<f64>)> {
    if w.numel() == 0 {
        return Err(Error::Quant("cannot calibrate an empty tensor".into()));
    }
    let layout = GroupLayout::of(w.shape(), w.numel(), scheme)?;
    let mut mins = vec![f64::INFINITY; layout.groups];
    let mut maxs = vec![f64::NEG_INFINITY; layout.groups];
    let data = w.data();
    for o in 0..layout.outer {
        for g in 0..layout.groups {
            let base = (o * layout.groups + g) * layout.tail;
            for &v in &data[base..base + layout.tail] {
                let v = v.to_f64();
                if v < mins[g] {
                    mins[g] = v;
                }
                if v > maxs[g] {
                    maxs[g] = v;
                }
            }
        }
    }
    Ok((layout, mins, maxs))
}

/// Min-max range setting.
pub fn calibrate_minmax<T: Scalar>(w: &Tensor<T>, scheme: &QuantScheme) -> Result<QuantParams> {
    let (layout, mins, maxs) = group_stats(w, scheme)?;
    let groups = layout.groups;
    let (qmin, qmax) = scheme.grid();
    let mut scale = Vec::with_capacity(groups);
    let mut zero_point = Vec::with_capacity(groups);
    for g in 0..groups {
        match scheme.symmetry {
            Symmetry::SymmetricSigned => {
                let maxabs = mins[g].abs().max(maxs[g].abs());
                let s = (maxabs / qmax as f64) as f32;
                scale.push(s.max(SCALE_FLOOR));
                zero_point.push(0);
            }
            Symmetry::Asymmetric => {
                let s = ((maxs[g] - mins[g]) / qmax as f64) as f32;
                let s = s.max(SCALE_FLOOR);
                let z = (-mins[g] / s as f64).round_ties_even().clamp(qmin as f64, qmax as f64);
                scale.push(s);
                zero_point.push(z as i32);
            }
        }
    }
    Ok(QuantParams { scale, zero_point })
}

/// Candidate scale multipliers for the MSE search: `grid_points` values
/// uniform over [0.2, 1.2] with the 1.0 candidate pinned exactly.
fn mse_candidates(grid_points: usize) -> Vec<f64> {
    let mut cs: Vec<f64> = (0..grid_points)
        .map(|i| 0.2 + i as f64 * (1.2 - 0.2) / (grid_points - 1) as f64)
        .collect();
    let nearest = cs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (*a - 1.0).abs().partial_cmp(&(*b - 1.0).abs()).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap();
    cs[nearest] = 1.0;
    cs
}

/// MSE range setting: scale-only grid search around the min-max scale,
/// zero-point fixed by the min-max rule. Ties break toward the smaller
/// candidate because the scan keeps the first strict improvement.
pub fn calibrate_mse<T: Scalar>(
    w: &Tensor<T>,
    scheme: &QuantScheme,
    grid_points: usize,
) -> Result<QuantParams> {
    if grid_points < 2 {
        return Err(Error::Quant(format!("grid_points {grid_points} must be >= 2")));
    }
    let base = calibrate_minmax(w, scheme)?;
    let layout = GroupLayout::of(w.shape(), w.numel(), scheme)?;
    let (qmin_i, qmax_i) = scheme.grid();
    let (qmin, qmax) = (T::from_f64(qmin_i as f64), T::from_f64(qmax_i as f64));
    let candidates = mse_candidates(grid_points);
    let data = w.data();

    let mut scale = Vec::with_capacity(layout.groups);
    let mut group_buf = vec![T::zero(); layout.outer * layout.tail];
    for g in 0..layout.groups {
        for o in 0..layout.outer {
            let base_i = (o * layout.groups + g) * layout.tail;
            group_buf[o * layout.tail..(o + 1) * layout.tail]
                .copy_from_slice(&data[base_i..base_i + layout.tail]);
        }
        let z = T::from_f64(base.zero_point[g] as f64);
        let mut best_s = base.scale[g];
        let mut best_mse = f64::INFINITY;
        for &c in &candidates {
            let cand = ((c * base.scale[g] as f64) as f32).max(SCALE_FLOOR);
            let st = T::from_f64(cand as f64);
            let mut acc = 0.0f64;
            for &v in &group_buf {
                let d = (v - qdq_one(v, st, z, qmin, qmax)).to_f64();
                acc += d * d;
            }
            let mse = acc / group_buf.len() as f64;
            if mse < best_mse {
                best_mse = mse;
                best_s = cand;
            }
        }
        scale.push(best_s);
    }
    Ok(QuantParams { scale, zero_point: base.zero_point })
}

/// Mean squared reconstruction error of fake-quantizing `w`.
pub fn reconstruction_mse<T: Scalar>(
    w: &Tensor<T>,
    params: &QuantParams,
    scheme: &QuantScheme,
) -> Result<f64> {
    let state = QuantizerState::new(*scheme, params.clone());
    let q = quantize_dequantize(w, &state)?;
    let mut acc = 0.0f64;
    for (&a, &b) in w.data().iter().zip(q.data()) {
        let d = (a - b).to_f64();
        acc += d * d;
    }
    Ok(acc / w.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sym4(scale: f32) -> QuantizerState {
        let scheme = QuantScheme::new(
            4,
            Symmetry::SymmetricSigned,
            Granularity::PerTensor,
        )
        .unwrap();
        QuantizerState::new(scheme, QuantParams { scale: vec![scale], zero_point: vec![0] })
    }

    fn asym4(scale: f32, z: i32) -> QuantizerState {
        let scheme =
            QuantScheme::new(4, Symmetry::Asymmetric, Granularity::PerTensor).unwrap();
        QuantizerState::new(scheme, QuantParams { scale: vec![scale], zero_point: vec![z] })
    }

    fn qdq1(x: f32, state: &QuantizerState) -> f32 {
        let t = Tensor::from_vec(vec![1], vec![x]).unwrap();
        quantize_dequantize(&t, state).unwrap().data()[0]
    }

    #[test]
    fn hand_cases_symmetric() {
        let s = sym4(0.25);
        assert_eq!(qdq1(0.0, &s), 0.0);
        assert!((qdq1(0.9, &s) - 1.0).abs() <= 1e-6);
        assert!((qdq1(10.0, &s) - 1.75).abs() <= 1e-6);
        assert!((qdq1(-10.0, &s) - (-2.0)).abs() <= 1e-6);
    }

    #[test]
    fn hand_case_asymmetric_clamps_negative() {
        let s = asym4(1.0, 0);
        assert_eq!(qdq1(-3.0, &s), 0.0);
    }

    #[test]
    fn rejects_nonpositive_scale_and_bad_shapes() {
        let mut s = sym4(0.25);
        s.params.scale[0] = 0.0;
        let t = Tensor::from_vec(vec![2], vec![0.1, 0.2]).unwrap();
        assert!(quantize_dequantize(&t, &s).is_err());

        let s = sym4(0.25);
        let mut bad = s.clone();
        bad.params.scale = vec![0.1, 0.1];
        bad.params.zero_point = vec![0, 0];
        assert!(quantize_dequantize(&t, &bad).is_err());
    }

    #[test]
    fn ste_hand_cases() {
        let s = sym4(0.25);
        let x = Tensor::from_vec(vec![3], vec![0.3, 100.0, 1.75]).unwrap();
        let up = Tensor::from_vec(vec![3], vec![2.0, 2.0, 2.0]).unwrap();
        let g = ste_backward(&up, &x, &s).unwrap();
        // In-range passes, far above clips, boundary (round = grid max) passes.
        assert_eq!(g.data(), &[2.0, 0.0, 2.0]);
    }

    #[test]
    fn ste_mask_matches_scalar_brute_force() {
        let scheme = QuantScheme::new(
            4,
            Symmetry::SymmetricSigned,
            Granularity::PerTensor,
        )
        .unwrap();
        let state = QuantizerState::new(
            scheme,
            QuantParams { scale: vec![0.13], zero_point: vec![0] },
        );
        let mut rng = Rng::new(99);
        let x = Tensor::<f32>::rand_uniform(vec![500], -3.0, 3.0, &mut rng);
        let mask = ste_mask(&x, &state).unwrap();
        for (&v, &m) in x.data().iter().zip(&mask) {
            let q = (v / 0.13f32).round_ties_even();
            let expect = if (-8.0..=7.0).contains(&q) { 1.0 } else { 0.0 };
            assert_eq!(m, expect, "x = {v}");
        }
    }

    #[test]
    fn minmax_hand_cases() {
        let scheme = QuantScheme::new(
            4,
            Symmetry::SymmetricSigned,
            Granularity::PerChannel { axis: 0 },
        )
        .unwrap();
        let w = Tensor::from_vec(vec![2, 2], vec![-3.5, 2.0, 1.0, -1.0]).unwrap();
        let p = calibrate_minmax(&w, &scheme).unwrap();
        assert!((p.scale[0] - 0.5).abs() < 1e-7);
        assert_eq!(p.zero_point, vec![0, 0]);

        let scheme =
            QuantScheme::new(4, Symmetry::Asymmetric, Granularity::PerTensor).unwrap();
        let w = Tensor::from_vec(vec![4], vec![0.0, 5.0, 15.0, 7.0]).unwrap();
        let p = calibrate_minmax(&w, &scheme).unwrap();
        assert_eq!(p.scale, vec![1.0]);
        assert_eq!(p.zero_point, vec![0]);
    }

    #[test]
    fn minmax_degenerate_group_uses_floor() {
        let scheme = QuantScheme::new(
            4,
            Symmetry::SymmetricSigned,
            Granularity::PerTensor,
        )
        .unwrap();
        let w = Tensor::from_vec(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let p = calibrate_minmax(&w, &scheme).unwrap();
        assert_eq!(p.scale, vec![SCALE_FLOOR]);
        assert_eq!(p.zero_point, vec![0]);
    }

    #[test]
    fn calibrate_rejects_bad_axis() {
        let w = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        let bad = QuantScheme::new(
            4,
            Symmetry::SymmetricSigned,
            Granularity::PerChannel { axis: 3 },
        )
        .unwrap();
        assert!(calibrate_minmax(&w, &bad).is_err());
    }

    #[test]
    fn mse_grid_includes_exact_one() {
        for g in [2, 3, 11, 101, 257] {
            let cs = mse_candidates(g);
            assert_eq!(cs.len(), g);
            assert!(cs.iter().any(|&c| c == 1.0), "grid_points {g}");
        }
    }

    #[test]
    fn mse_on_grid_weights_returns_minmax_scale() {
        // Values exactly on the s = 0.5 min-max grid (max 3.5 = 7 * 0.5).
        let scheme = QuantScheme::new(
            4,
            Symmetry::SymmetricSigned,
            Granularity::PerTensor,
        )
        .unwrap();
        let w =
            Tensor::from_vec(vec![4], vec![-3.5, 0.5, 1.5, 3.5]).unwrap();
        let minmax = calibrate_minmax(&w, &scheme).unwrap();
        let mse = calibrate_mse(&w, &scheme, 101).unwrap();
        assert_eq!(minmax.scale, mse.scale);
        assert_eq!(reconstruction_mse(&w, &mse, &scheme).unwrap(), 0.0);
    }

    #[test]
    fn mse_matches_exhaustive_oracle() {
        // Independent oracle: evaluate every candidate with a naive loop.
        let scheme = QuantScheme::new(
            4,
            Symmetry::SymmetricSigned,
            Granularity::PerTensor,
        )
        .unwrap();
        let mut rng = Rng::new(7);
        for trial in 0..50 {
            let w = Tensor::<f32>::rand_uniform(vec![8], -2.0, 2.0, &mut rng);
            let got = calibrate_mse(&w, &scheme, 101).unwrap();

            let base = calibrate_minmax(&w, &scheme).unwrap();
            let mut best = (f64::INFINITY, 0.0f32);
            for &c in &mse_candidates(101) {
                let cand = ((c * base.scale[0] as f64) as f32).max(SCALE_FLOOR);
                let p = QuantParams { scale: vec![cand], zero_point: vec![0] };
                let mse = reconstruction_mse(&w, &p, &scheme).unwrap();
                if mse < best.0 {
                    best = (mse, cand);
                }
            }
            assert_eq!(got.scale[0], best.1, "trial {trial}");
        }
    }

    #[test]
    fn mse_never_worse_than_minmax() {
        let scheme = QuantScheme::new(
            4,
            Symmetry::SymmetricSigned,
            Granularity::PerChannel { axis: 1 },
        )
        .unwrap();
        let mut rng = Rng::new(21);
        for _ in 0..50 {
            let w = Tensor::<f32>::randn(vec![6, 5], 1.0, &mut rng);
            let a = calibrate_mse(&w, &scheme, 101).unwrap();
            let b = calibrate_minmax(&w, &scheme).unwrap();
            let ra = reconstruction_mse(&w, &a, &scheme).unwrap();
            let rb = reconstruction_mse(&w, &b, &scheme).unwrap();
            assert!(ra <= rb, "{ra} > {rb}");
        }
    }

    #[test]
    fn reconstruction_hand_case_and_oracle() {
        let s = asym4(1.0, 0);
        let w = Tensor::from_vec(vec![1], vec![0.1]).unwrap();
        let mse = reconstruction_mse(&w, &s.params, &s.scheme).unwrap();
        assert!((mse - 0.01).abs() < 1e-9);

        // Naive two-pass loop oracle on random tensors.
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let w = Tensor::<f32>::rand_uniform(vec![32], -4.0, 4.0, &mut rng);
            let got = reconstruction_mse(&w, &s.params, &s.scheme).unwrap();
            let q = quantize_dequantize(&w, &s).unwrap();
            let mut acc = 0.0;
            for i in 0..w.numel() {
                acc += (w.data()[i] as f64 - q.data()[i] as f64).powi(2);
            }
            let want = acc / w.numel() as f64;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn idempotent_monotone_bounded() {
        let mut rng = Rng::new(13);
        for trial in 0..200 {
            let bits = [2, 3, 4, 8][trial % 4];
            let scheme = QuantScheme::new(
                bits,
                if trial % 2 == 0 { Symmetry::SymmetricSigned } else { Symmetry::Asymmetric },
                Granularity::PerTensor,
            )
            .unwrap();
            let w = Tensor::<f32>::rand_uniform(vec![64], -3.0, 3.0, &mut rng);
            let params = calibrate_minmax(&w, &scheme).unwrap();
            let state = QuantizerState::new(scheme, params.clone());

            let q1 = quantize_dequantize(&w, &state).unwrap();
            let q2 = quantize_dequantize(&q1, &state).unwrap();
            assert_eq!(q1.data(), q2.data(), "idempotence, trial {trial}");

            // Monotonicity on a sorted copy.
            let mut sorted = w.data().to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let qs = quantize_dequantize(
                &Tensor::from_vec(vec![64], sorted).unwrap(),
                &state,
            )
            .unwrap();
            for pair in qs.data().windows(2) {
                assert!(pair[0] <= pair[1], "monotonicity, trial {trial}");
            }

            // Boundedness strictly inside the representable range.
            let (qmin, qmax) = scheme.grid();
            let s = params.scale[0];
            let z = params.zero_point[0] as f32;
            let lo = s * (qmin as f32 - z);
            let hi = s * (qmax as f32 - z);
            for (&x, &y) in w.data().iter().zip(q1.data()) {
                if x > lo && x < hi {
                    assert!(
                        (x - y).abs() <= s * 0.5 * (1.0 + 1e-5),
                        "bound violated: x {x} y {y} s {s}"
                    );
                }
            }
        }
    }

    #[test]
    fn fake_quant_var_identity_when_disabled() {
        let tape = crate::tensor::Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![0.3, 0.4]).unwrap());
        let mut state = sym4(0.25);
        state.enabled = false;
        let y = fake_quant_var(&x, &state).unwrap();
        assert_eq!(y.id(), x.id());
    }
}
