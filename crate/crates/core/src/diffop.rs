//! Learnable one-dimensional convolution kernels acting as finite-difference
//! operators along the time axis.
//!
//! A kernel `q` of odd length `N` has taps indexed `g = -(N-1)/2 ..= (N-1)/2`.
//! Its moment vector `v_i = (1/i!) Σ_g g^i q[g]` tells which derivative it
//! approximates: a kernel with `v_j = 0` for `j < d` and `v_d = 1` applied to
//! samples with spacing `δ` returns `δ^d f^(d)` plus higher-order terms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking the moment constraint of a labelled kernel.
pub const MOMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    weights: Vec<f64>,
    derivative_order: Option<usize>,
}

impl ConvKernel {
    /// An unlabelled kernel. `weights.len()` must be odd and at least 3.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_size(weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite kernel weight".into()));
        }
        Ok(Self { weights, derivative_order: None })
    }

    pub fn zeros(size: usize) -> Result<Self> {
        Self::new(vec![0.0; size])
    }

    /// The identity kernel: a single one at the centre tap.
    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size];
        check_size(size)?;
        w[size / 2] = 1.0;
        Ok(Self { weights: w, derivative_order: Some(0) })
    }

    /// The minimum-norm kernel of the given derivative order.
    pub fn for_order(size: usize, order: usize) -> Result<Self> {
        constrain_kernel(&Self::zeros(size)?, order)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn derivative_order(&self) -> Option<usize> {
        self.derivative_order
    }

    /// Half-width `(N-1)/2`.
    pub fn half_width(&self) -> usize {
        self.weights.len() / 2
    }

    /// Overwrites the weights and drops the order label; callers re-project
    /// with [`constrain_kernel`] afterwards.
    pub(crate) fn set_weights_unchecked(&mut self, weights: &[f64]) {
        self.weights.copy_from_slice(weights);
        self.derivative_order = None;
    }

    /// True when the labelled order (if any) satisfies its moment constraint.
    pub fn satisfies_constraint(&self) -> bool {
        match self.derivative_order {
            None => true,
            Some(d) => {
                let v = moment_vector(self);
                v.iter().take(d).all(|x| x.abs() <= MOMENT_TOL) && (v[d] - 1.0).abs() <= MOMENT_TOL
            }
        }
    }
}

fn check_size(n: usize) -> Result<()> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::Config(format!("kernel size must be odd and at least 3, got {n}")));
    }
    Ok(())
}

fn factorial(i: usize) -> f64 {
    (1..=i).map(|k| k as f64).product()
}

/// Row `i` of the moment matrix: `g^i / i!` for every tap offset `g`.
fn moment_row(n: usize, i: usize) -> Vec<f64> {
    let half = (n / 2) as i64;
    let fact = factorial(i);
    (-half..=half).map(|g| (g as f64).powi(i as i32) / fact).collect()
}

pub fn moment_vector(kernel: &ConvKernel) -> Vec<f64> {
    let n = kernel.len();
    (0..n)
        .map(|i| moment_row(n, i).iter().zip(kernel.weights()).map(|(a, q)| a * q).sum())
        .collect()
}

/// Projects the kernel onto `{v_j = 0 for j < order, v_order = 1}` with the
/// smallest possible change in Euclidean norm. Moments above `order` stay
/// free.
pub fn constrain_kernel(kernel: &ConvKernel, order: usize) -> Result<ConvKernel> {
    let n = kernel.len();
    if order >= n {
        return Err(Error::UnsupportedOrder(order));
    }
    let rows = order + 1;
    let a = DMatrix::from_fn(rows, n, |i, g| moment_row(n, i)[g]);
    let q = DVector::from_column_slice(kernel.weights());
    let mut target = DVector::zeros(rows);
    target[order] = 1.0;
    let residual = target - &a * &q;
    let gram = &a * a.transpose();
    let multipliers = gram
        .lu()
        .solve(&residual)
        .ok_or_else(|| Error::Internal("singular moment system".into()))?;
    let projected = q + a.transpose() * multipliers;
    Ok(ConvKernel {
        weights: projected.iter().copied().collect(),
        derivative_order: Some(order),
    })
}

/// `Σ_g q[g] · window[centre + g]`, correlation convention.
pub fn convolve(kernel: &ConvKernel, window: &[f64]) -> Result<f64> {
    if window.len() != kernel.len() {
        return Err(Error::Shape { expected: kernel.len(), got: window.len() });
    }
    Ok(dot(kernel.weights(), window))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Classical three-point finite-difference derivatives of `values` with
/// respect to `coords`, on interior points (`len - 2` values, aligned with
/// `coords[1..len-1]`). Works for uneven and decreasing coordinates. A
/// two-point input with order 1 yields the single secant slope.
pub fn fd_oracle(values: &[f64], coords: &[f64], order: usize) -> Result<Vec<f64>> {
    if !(1..=2).contains(&order) {
        return Err(Error::UnsupportedOrder(order));
    }
    if values.len() != coords.len() {
        return Err(Error::Shape { expected: coords.len(), got: values.len() });
    }
    let m = values.len();
    if m < order + 1 {
        return Err(Error::TooShort(format!("{m} points for order {order}")));
    }
    if m == 2 {
        return Ok(vec![(values[1] - values[0]) / (coords[1] - coords[0])]);
    }
    let out = (1..m - 1)
        .map(|i| {
            let h1 = coords[i] - coords[i - 1];
            let h2 = coords[i + 1] - coords[i];
            let (a, b, c) = (values[i - 1], values[i], values[i + 1]);
            if order == 1 {
                -h2 / (h1 * (h1 + h2)) * a + (h2 - h1) / (h1 * h2) * b + h1 / (h2 * (h1 + h2)) * c
            } else {
                2.0 * (a / (h1 * (h1 + h2)) - b / (h1 * h2) + c / (h2 * (h1 + h2)))
            }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(w: &[f64]) -> ConvKernel {
        ConvKernel::new(w.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn moment_vectors_of_standard_stencils() {
        assert_close(&moment_vector(&k(&[-0.5, 0.0, 0.5])), &[0.0, 1.0, 0.0], 1e-15);
        assert_close(&moment_vector(&k(&[1.0, -2.0, 1.0])), &[0.0, 0.0, 1.0], 1e-15);
        assert_close(&moment_vector(&k(&[0.0, 1.0, 0.0])), &[1.0, 0.0, 0.0], 1e-15);
    }

    #[test]
    fn projection_of_skewed_first_order_kernel() {
        // Constraints: sum q = 0 and q[1] - q[-1] = 1. The minimum-norm
        // correction of [-0.4, 0, 0.6] subtracts the excess sum 0.2 evenly.
        let c = constrain_kernel(&k(&[-0.4, 0.0, 0.6]), 1).unwrap();
        let shift = 0.2 / 3.0;
        assert_close(c.weights(), &[-0.4 - shift, -shift, 0.6 - shift], 1e-12);
        let v = moment_vector(&c);
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        assert!(c.satisfies_constraint());
    }

    #[test]
    fn projection_cases() {
        let fixed = constrain_kernel(&k(&[-0.5, 0.0, 0.5]), 1).unwrap();
        assert_close(fixed.weights(), &[-0.5, 0.0, 0.5], 1e-15);
        let second = constrain_kernel(&k(&[3.0, 7.0, -1.0]), 2).unwrap();
        assert_close(second.weights(), &[1.0, -2.0, 1.0], 1e-12);
        assert_close(ConvKernel::for_order(3, 1).unwrap().weights(), &[-0.5, 0.0, 0.5], 1e-15);
        assert!(matches!(constrain_kernel(&k(&[0.0; 3]), 3), Err(Error::UnsupportedOrder(3))));
    }

    #[test]
    fn kernel_size_rules() {
        assert!(ConvKernel::new(vec![0.0; 4]).is_err());
        assert!(ConvKernel::new(vec![0.0; 1]).is_err());
        assert_eq!(ConvKernel::delta(5).unwrap().weights(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn convolution_examples() {
        let v = convolve(&k(&[-0.5, 0.0, 0.5]), &[0.81, 1.00, 1.21]).unwrap();
        assert!((v - 0.20).abs() < 1e-12);
        assert_eq!(convolve(&k(&[0.0, 1.0, 0.0]), &[3.0, 4.0, 5.0]).unwrap(), 4.0);
        assert_eq!(convolve(&k(&[0.0; 3]), &[3.0, 4.0, 5.0]).unwrap(), 0.0);
        assert!(matches!(convolve(&k(&[0.0; 3]), &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn oracle_examples() {
        let x: Vec<f64> = (0..21).map(|i| i as f64 * 0.1).collect();
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let d = fd_oracle(&sq, &x, 1).unwrap();
        for (i, v) in d.iter().enumerate() {
            assert!((v - 2.0 * x[i + 1]).abs() < 1e-12);
        }
        assert!(fd_oracle(&[2.0; 5], &x[..5], 2).unwrap().iter().all(|v| v.abs() < 1e-9));
        let fine: Vec<f64> = (0..1001).map(|i| i as f64 * 1e-3).collect();
        let s: Vec<f64> = fine.iter().map(|v| v.sin()).collect();
        let d = fd_oracle(&s, &fine, 1).unwrap();
        let err = d.iter().enumerate().map(|(i, v)| (v - fine[i + 1].cos()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert!(matches!(fd_oracle(&s, &fine, 3), Err(Error::UnsupportedOrder(3))));
    }

    /// Error of the ratio estimator `(K⊛sin)/(K⊛t)` against `cos` at fixed
    /// points for a sequence of halved spacings.
    fn ratio_errors(kernel: &ConvKernel, points: &[f64], spacings: &[f64]) -> Vec<f64> {
        let half = kernel.half_width() as i64;
        spacings
            .iter()
            .map(|&h| {
                points
                    .iter()
                    .map(|&x0| {
                        let grid: Vec<f64> = (-half..=half).map(|g| x0 + g as f64 * h).collect();
                        let f: Vec<f64> = grid.iter().map(|x| x.sin()).collect();
                        let est = convolve(kernel, &f).unwrap() / convolve(kernel, &grid).unwrap();
                        (est - x0.cos()).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    #[test]
    fn ratio_estimator_is_second_order() {
        let kernel = ConvKernel::for_order(3, 1).unwrap();
        let errs = ratio_errors(&kernel, &[0.3, 0.7, 1.1], &[0.1, 0.05, 0.025, 0.0125]);
        for w in errs.windows(2) {
            let factor = w[0] / w[1];
            assert!((3.5..=4.5).contains(&factor), "{errs:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn kernel5() -> impl Strategy<Value = ConvKernel> {
            proptest::collection::vec(-3.0f64..3.0, 5).prop_map(|w| ConvKernel::new(w).unwrap())
        }

        proptest! {
            #[test]
            fn projection_is_idempotent(q in kernel5(), order in 0usize..5) {
                let once = constrain_kernel(&q, order).unwrap();
                let twice = constrain_kernel(&once, order).unwrap();
                for (a, b) in once.weights().iter().zip(twice.weights()) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
                prop_assert!(once.satisfies_constraint());
            }

            #[test]
            fn moments_are_linear(q1 in kernel5(), q2 in kernel5(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let mix: Vec<f64> = q1.weights().iter().zip(q2.weights()).map(|(x, y)| a * x + b * y).collect();
                let vm = moment_vector(&ConvKernel::new(mix).unwrap());
                let v1 = moment_vector(&q1);
                let v2 = moment_vector(&q2);
                for i in 0..5 {
                    prop_assert!((vm[i] - (a * v1[i] + b * v2[i])).abs() < 1e-10);
                }
            }
        }
    }
}
