//! Smooth strongly convex functions with analytic derivatives and curvature
//! certificates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{max_eigenvalue, min_eigenvalue};

/// Scalar perturbation `φ` applied coordinate-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarTerm {
    /// `log(1 + x²)`, with `φ'' ∈ [−1/4, 2]`.
    LogOnePlusSq,
    /// `log cosh x`, with `φ'' ∈ (0, 1]`.
    LogCosh,
    /// `x⁴ / 4`, with unbounded `φ''`.
    Quartic,
}

impl ScalarTerm {
    pub fn value(self, x: f64) -> f64 {
        match self {
            ScalarTerm::LogOnePlusSq => x.mul_add(x, 1.0).ln(),
            ScalarTerm::LogCosh => {
                let a = x.abs();
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
            ScalarTerm::Quartic => x.powi(4) / 4.0,
        }
    }

    pub fn d1(self, x: f64) -> f64 {
        match self {
            ScalarTerm::LogOnePlusSq => 2.0 * x / (1.0 + x * x),
            ScalarTerm::LogCosh => x.tanh(),
            ScalarTerm::Quartic => x.powi(3),
        }
    }

    pub fn d2(self, x: f64) -> f64 {
        match self {
            ScalarTerm::LogOnePlusSq => 2.0 * (1.0 - x * x) / (1.0 + x * x).powi(2),
            ScalarTerm::LogCosh => 1.0 / x.cosh().powi(2),
            ScalarTerm::Quartic => 3.0 * x * x,
        }
    }

    /// Bounds on `φ''` over the real line.
    pub fn curvature_range(self) -> (f64, Option<f64>) {
        match self {
            ScalarTerm::LogOnePlusSq => (-0.25, Some(2.0)),
            ScalarTerm::LogCosh => (0.0, Some(1.0)),
            ScalarTerm::Quartic => (0.0, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexFn {
    /// `½ xᵀ H x + cᵀ x`.
    Quadratic { hess: DMatrix<f64>, lin: DVector<f64> },
    /// `Σ_i ½ c_i x_i² + κ φ(x_i)`.
    Separable { quad: DVector<f64>, weight: f64, term: ScalarTerm },
}

impl ConvexFn {
    pub fn quadratic(hess: DMatrix<f64>) -> Self {
        let n = hess.nrows();
        ConvexFn::Quadratic { hess, lin: DVector::zeros(n) }
    }

    /// `c/2 ‖x‖²` in dimension `n`.
    pub fn isotropic(n: usize, c: f64) -> Self {
        Self::quadratic(DMatrix::identity(n, n) * c)
    }

    pub fn separable(quad: DVector<f64>, weight: f64, term: ScalarTerm) -> Self {
        ConvexFn::Separable { quad, weight, term }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexFn::Quadratic { hess, .. } => hess.nrows(),
            ConvexFn::Separable { quad, .. } => quad.len(),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            ConvexFn::Quadratic { hess, lin } => 0.5 * x.dot(&(hess * x)) + lin.dot(x),
            ConvexFn::Separable { quad, weight, term } => x
                .iter()
                .zip(quad.iter())
                .map(|(&xi, &c)| 0.5 * c * xi * xi + weight * term.value(xi))
                .sum(),
        }
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ConvexFn::Quadratic { hess, lin } => hess * x + lin,
            ConvexFn::Separable { quad, weight, term } => {
                DVector::from_fn(x.len(), |i, _| quad[i] * x[i] + weight * term.d1(x[i]))
            }
        }
    }

    pub fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            ConvexFn::Quadratic { hess, .. } => hess.clone(),
            ConvexFn::Separable { quad, weight, term } => DMatrix::from_diagonal(&DVector::from_fn(x.len(), |i, _| {
                quad[i] + weight * term.d2(x[i])
            })),
        }
    }

    /// Strong-convexity certificate (lower Hessian bound).
    pub fn mu(&self) -> f64 {
        match self {
            ConvexFn::Quadratic { hess, .. } => min_eigenvalue(hess),
            ConvexFn::Separable { quad, weight, term } => {
                let (lo, hi) = term.curvature_range();
                let phi_min = if *weight >= 0.0 { lo } else { hi.unwrap_or(f64::INFINITY) };
                quad.min() + weight * phi_min
            }
        }
    }

    /// Smoothness certificate (upper Hessian bound), if finite.
    pub fn ell(&self) -> Option<f64> {
        match self {
            ConvexFn::Quadratic { hess, .. } => Some(max_eigenvalue(hess)),
            ConvexFn::Separable { quad, weight, term } => {
                let (lo, hi) = term.curvature_range();
                let phi_max = if *weight >= 0.0 { hi? } else { lo };
                Some(quad.max() + weight * phi_max)
            }
        }
    }

    /// Convex conjugate, available for positive-definite quadratics.
    pub fn conjugate(&self, y: &DVector<f64>) -> Option<f64> {
        match self {
            ConvexFn::Quadratic { hess, lin } => {
                let d = y - lin;
                let sol = hess.clone().cholesky()?.solve(&d);
                Some(0.5 * d.dot(&sol))
            }
            ConvexFn::Separable { .. } => None,
        }
    }

    /// Unique minimizer, by Newton's method.
    pub fn argmin(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for _ in 0..100 {
            let g = self.grad(&x);
            if g.norm() < 1e-14 {
                break;
            }
            let step = self.hess(&x).lu().solve(&g).unwrap_or(g);
            x -= step;
        }
        x
    }
}
