//! Scalar abstraction so the same model code runs in 32-bit (training) and
//! 64-bit (gradient checks).

use std::fmt::{Debug, Display};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Gaussian matrix with the given standard deviation. Samples are drawn in
/// 64-bit and rounded, so both precisions see the same weights.
pub fn gaussian<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || T::of(normal.sample(rng)))
}

/// Uniform matrix on `[-bound, bound]`.
pub fn uniform<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.gen_range(-bound..=bound)))
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<T> {
    let scale = T::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            scale
        }
    })
}

/// `x · wᵀ` for row-major activations and (out × in) weights.
pub fn linear<T: Real>(x: ArrayView2<T>, w: ArrayView2<T>) -> Array2<T> {
    x.dot(&w.t())
}

pub fn log_sum_exp<T: Real>(row: ArrayView1<T>) -> T {
    let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        return max;
    }
    let sum = row.fold(T::zero(), |s, &v| s + (v - max).exp());
    max + sum.ln()
}

pub fn log_softmax<T: Real>(row: ArrayView1<T>) -> Array1<T> {
    let lse = log_sum_exp(row);
    row.mapv(|v| v - lse)
}

/// Row-wise softmax in place; `-inf` entries become exact zeros.
pub fn softmax_rows<T: Real>(m: &mut Array2<T>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn all_finite<T: Real>(values: &[T]) -> bool {
    values.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = array![[1.0f32, 2.0, 3.0], [0.0, f32::NEG_INFINITY, 0.0]];
        softmax_rows(&mut m);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert_eq!(m[[1, 1]], 0.0);
        let mut d = array![[1.0f64, -4.0, 0.5]];
        softmax_rows(&mut d);
        assert!((d.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_direct() {
        let row = array![0.3f64, -1.2, 2.0];
        let ls = log_softmax(row.view());
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (a, b) in ls.iter().zip(row.iter()) {
            assert!((a - (b - z.ln())).abs() < 1e-12);
        }
    }
}
