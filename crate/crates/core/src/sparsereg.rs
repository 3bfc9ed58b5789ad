//! L1-regularized least squares solved with FISTA.
//!
//! The objective is `‖b - XW‖² + λ‖W‖₁` with no one-half factor, so the
//! gradient of the smooth part is `2Xᵀ(XW - b)` and its Lipschitz constant is
//! the largest eigenvalue of `2XᵀX`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 2000;
pub const DEFAULT_TOL: f64 = 1e-10;
const POWER_STEPS: usize = 50;
const POWER_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl LassoProblem {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>, lambda: f64) -> Result<Self> {
        let p = Self { design, response, lambda, max_iters: DEFAULT_MAX_ITERS, tol: DEFAULT_TOL };
        p.validate()?;
        Ok(p)
    }

    /// Builds a problem from row-major data.
    pub fn from_rows(rows: &[Vec<f64>], response: &[f64], lambda: f64) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape { expected: n, got: rows.iter().map(Vec::len).find(|&l| l != n).unwrap_or(n) });
        }
        let design = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Self::new(design, DVector::from_column_slice(response), lambda)
    }

    pub fn with_limits(mut self, max_iters: usize, tol: f64) -> Self {
        self.max_iters = max_iters;
        self.tol = tol;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.design.nrows() != self.response.len() {
            return Err(Error::Shape { expected: self.design.nrows(), got: self.response.len() });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        if self.design.iter().chain(self.response.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite entry in lasso data".into()));
        }
        Ok(())
    }

    /// `‖b - XW‖² + λ‖W‖₁`.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let r = &self.response - &self.design * w;
        r.norm_squared() + self.lambda * w.lp_norm(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FistaResult {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub nonzeros: usize,
    pub restarts: usize,
    /// Objective after every iteration, starting with the value at W = 0.
    pub trace: Vec<f64>,
}

pub fn soft_threshold(value: f64, threshold: f64) -> f64 {
    value.signum() * (value.abs() - threshold).max(0.0)
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn power_iteration(gram: &DMatrix<f64>) -> f64 {
    let n = gram.nrows();
    if n == 0 {
        return 0.0;
    }
    // An irregular start vector avoids accidental orthogonality to the top
    // eigenvector for structured matrices.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract());
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..POWER_STEPS {
        let w = gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let converged = (norm - estimate).abs() <= POWER_TOL * norm;
        estimate = norm;
        if converged {
            break;
        }
    }
    estimate
}

pub fn fista(problem: &LassoProblem) -> Result<FistaResult> {
    problem.validate()?;
    let x = &problem.design;
    let n = x.ncols();
    let gram = x.transpose() * x;
    let xtb = x.transpose() * &problem.response;
    let lipschitz = 2.0 * power_iteration(&gram);

    let mut w = DVector::zeros(n);
    let mut f_prev = problem.objective(&w);
    let mut trace = vec![f_prev];
    if lipschitz <= 0.0 || n == 0 {
        return Ok(FistaResult { weights: w.iter().copied().collect(), objective: f_prev, iterations: 0, nonzeros: 0, restarts: 0, trace });
    }
    let threshold = problem.lambda / lipschitz;
    let prox_step = |point: &DVector<f64>| -> DVector<f64> {
        let grad = 2.0 * (&gram * point - &xtb);
        (point - grad / lipschitz).map(|v| soft_threshold(v, threshold))
    };

    let mut z = w.clone();
    let mut t: f64 = 1.0;
    let mut iterations = 0;
    let mut restarts = 0;
    for _ in 0..problem.max_iters {
        iterations += 1;
        let mut w_next = prox_step(&z);
        let mut f_next = problem.objective(&w_next);
        if !f_next.is_finite() {
            return Err(Error::Numeric(format!("non-finite lasso objective at iteration {iterations}")));
        }
        if f_next > f_prev {
            restarts += 1;
            t = 1.0;
            w_next = prox_step(&w);
            f_next = problem.objective(&w_next);
            if !(f_next <= f_prev) {
                w_next = w.clone();
                f_next = f_prev;
            }
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = &w_next + (&w_next - &w) * ((t - 1.0) / t_next);
        let decrease = f_prev - f_next;
        w = w_next;
        f_prev = f_next;
        t = t_next;
        trace.push(f_prev);
        if decrease < problem.tol {
            break;
        }
    }
    let nonzeros = w.iter().filter(|v| **v != 0.0).count();
    Ok(FistaResult { weights: w.iter().copied().collect(), objective: f_prev, iterations, nonzeros, restarts, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-2.5, 1.0), -1.5);
        assert_eq!(soft_threshold(0.7, 0.0), 0.7);
    }

    #[test]
    fn scalar_problem() {
        let p = LassoProblem::from_rows(&[vec![1.0]], &[2.0], 1.0).unwrap();
        let r = fista(&p).unwrap();
        assert!((r.weights[0] - 1.5).abs() < 1e-6, "{r:?}");
        // Fine scan of (2 - w)^2 + |w|.
        let best = (0..=40_000)
            .map(|i| -2.0 + i as f64 * 1e-4)
            .min_by(|a, b| ((2.0 - a).powi(2) + a.abs()).total_cmp(&((2.0 - b).powi(2) + b.abs())))
            .unwrap();
        assert!((best - 1.5).abs() < 1e-4);
    }

    #[test]
    fn unregularized_orthonormal_design_gives_projection() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rows = vec![vec![s, s], vec![s, -s], vec![0.0, 0.0]];
        let b = [1.0, 3.0, 5.0];
        let r = fista(&LassoProblem::from_rows(&rows, &b, 0.0).unwrap()).unwrap();
        let ols = [s * 1.0 + s * 3.0, s * 1.0 - s * 3.0];
        for (w, o) in r.weights.iter().zip(ols) {
            assert!((w - o).abs() < 1e-6);
        }
    }

    #[test]
    fn large_lambda_gives_exact_zero() {
        let rows = vec![vec![1.0, 0.5], vec![0.2, -1.0], vec![0.3, 0.3]];
        let b = [1.0, -2.0, 0.5];
        let xtb_max = [1.0 + 0.2 * -2.0 + 0.15, 0.5 + 2.0 + 0.15f64].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let r = fista(&LassoProblem::from_rows(&rows, &b, 2.0 * xtb_max + 1e-6).unwrap()).unwrap();
        assert!(r.weights.iter().all(|w| *w == 0.0));
        assert_eq!(r.nonzeros, 0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(LassoProblem::from_rows(&[vec![1.0]], &[1.0, 2.0], 1.0), Err(Error::Shape { .. })));
        assert!(matches!(LassoProblem::from_rows(&[vec![1.0]], &[1.0], -1.0), Err(Error::Config(_))));
        assert!(matches!(LassoProblem::from_rows(&[vec![f64::NAN]], &[1.0], 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn power_iteration_matches_eigen_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let g = x.transpose() * &x;
        let exact = g.clone().symmetric_eigen().eigenvalues.max();
        assert!((power_iteration(&g) - exact).abs() < 1e-6 * exact);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, f64)> {
            (2usize..4, 5usize..20).prop_flat_map(|(n, m)| {
                (
                    proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, n), m),
                    proptest::collection::vec(-3.0f64..3.0, m),
                    0.0f64..5.0,
                )
            })
        }

        proptest! {
            #[test]
            fn never_worse_than_zero_and_monotone((rows, b, lambda) in instance()) {
                let p = LassoProblem::from_rows(&rows, &b, lambda).unwrap();
                let r = fista(&p).unwrap();
                prop_assert!(r.objective <= r.trace[0]);
                for w in r.trace.windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
            }

            #[test]
            fn homogeneous_in_response_and_lambda((rows, b, lambda) in instance(), alpha in 0.2f64..5.0) {
                let tight = |b: &[f64], l: f64| fista(&LassoProblem::from_rows(&rows, b, l).unwrap().with_limits(20_000, 0.0)).unwrap();
                let base = tight(&b, lambda);
                let scaled_b: Vec<f64> = b.iter().map(|v| v * alpha).collect();
                let scaled = tight(&scaled_b, lambda * alpha);
                let norm = base.weights.iter().map(|w| w.abs()).fold(0.0, f64::max).max(1e-3);
                for (w1, w2) in base.weights.iter().zip(&scaled.weights) {
                    prop_assert!((w1 * alpha - w2).abs() <= 1e-6 * alpha * norm.max(1.0), "{:?} {:?}", base.weights, scaled.weights);
                }
            }
        }
    }
}
