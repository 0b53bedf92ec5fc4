//! Numerical checks of how curvature and covariance pass through the
//! variant infimal convolution `(f □_B ω)(x) = min_u f(u) + ω(x − B u)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::ConvexFn;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, min_singular, op_norm, symmetrize};
use crate::rng;

const GRAD_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 200;

/// Value and minimizer `u(x)` of `f(u) + ω(x − B u)`.
pub fn infimal_convolution(
    f: &ConvexFn,
    omega: &ConvexFn,
    b: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    if b.nrows() != omega.dim() || b.ncols() != f.dim() || x.len() != omega.dim() {
        return Err(Error::ShapeMismatch(format!(
            "B is {}x{}, f has dimension {}, ω and x have {} and {}",
            b.nrows(),
            b.ncols(),
            f.dim(),
            omega.dim(),
            x.len()
        )));
    }
    let objective = |u: &DVector<f64>| f.value(u) + omega.value(&(x - b * u));
    let mut u = DVector::zeros(f.dim());
    let mut value = objective(&u);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        let z = x - b * &u;
        let grad = f.grad(&u) - b.transpose() * omega.grad(&z);
        residual = grad.norm();
        if residual <= GRAD_TOL {
            return Ok((value, u));
        }
        let hess = f.hess(&u) + b.transpose() * omega.hess(&z) * b;
        let step = hess.cholesky().map(|c| c.solve(&grad)).unwrap_or_else(|| grad.clone());
        let slope = grad.dot(&step);
        let scale = value.abs().max(1.0);
        let below_roundoff = slope <= 1e-12 * scale;
        let mut t = 1.0;
        loop {
            let cand = &u - &step * t;
            let v = objective(&cand);
            if v <= value - 1e-4 * t * slope || (below_roundoff && v <= value + 1e-12 * scale) || t < 1e-12 {
                u = cand;
                value = v;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NoConvergence { iterations: MAX_NEWTON, residual })
}

/// Secant bounds `(μ̂, ℓ̂)` of a gradient map over the box `[lo, hi]`.
///
/// Half the chords are short (length about 1e−3 of the box), the rest join
/// two independent uniform points; in one dimension adjacent points of a
/// uniform grid are probed as well.
pub fn curvature_probe<G>(grad: G, lo: &DVector<f64>, hi: &DVector<f64>, samples: usize, seed: u64) -> (f64, f64)
where
    G: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let dim = lo.len();
    let width = hi - lo;
    let secant = |x: &DVector<f64>, y: &DVector<f64>| {
        let dx = x - y;
        let dg = grad(x) - grad(y);
        let n2 = dx.norm_squared();
        (dg.dot(&dx) / n2, dg.norm() / n2.sqrt())
    };
    let mut pairs: Vec<(f64, f64)> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::aux(seed, i);
            let x = DVector::from_fn(dim, |k, _| lo[k] + width[k] * r.random::<f64>());
            let y = if i % 2 == 0 {
                let dir = DVector::from_fn(dim, |_, _| r.sample::<f64, _>(StandardNormal));
                let dir = dir.normalize() * (1e-3 * width.norm());
                &x + dir
            } else {
                DVector::from_fn(dim, |k, _| lo[k] + width[k] * r.random::<f64>())
            };
            secant(&x, &y)
        })
        .collect();
    if dim == 1 && samples > 1 {
        let step = width[0] / samples as f64;
        pairs.extend((0..samples).map(|k| {
            let x = DVector::from_element(1, lo[0] + step * k as f64);
            let y = DVector::from_element(1, lo[0] + step * (k + 1) as f64);
            secant(&x, &y)
        }));
    }
    pairs
        .iter()
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(m, l), p| (m.min(p.0), l.max(p.1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyReport {
    /// `(f □_B ω)*(y)` from the numerically recovered quadratic.
    pub lhs: f64,
    /// `ω*(y) + f*(Bᵀy)`.
    pub rhs: f64,
    pub gap: f64,
}

/// Conjugate of the infimal convolution of two positive-definite quadratics
/// against the sum of conjugates.
pub fn conjugacy_check(f: &ConvexFn, omega: &ConvexFn, b: &DMatrix<f64>, y: &DVector<f64>) -> Result<ConjugacyReport> {
    let not_quadratic = || Error::InvalidArgument("conjugacy check needs positive-definite quadratics".into());
    let rhs = omega.conjugate(y).ok_or_else(not_quadratic)? + f.conjugate(&(b.transpose() * y)).ok_or_else(not_quadratic)?;
    let n = omega.dim();
    let grad_at = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let (_, u) = infimal_convolution(f, omega, b, x)?;
        Ok(omega.grad(&(x - b * u)))
    };
    let origin = DVector::zeros(n);
    let (offset, _) = infimal_convolution(f, omega, b, &origin)?;
    let lin = grad_at(&origin)?;
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let col = grad_at(&DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 }))? - &lin;
        hess.set_column(i, &col);
    }
    let hess = symmetrize(&hess);
    let d = y - &lin;
    let sol = hess.cholesky().ok_or_else(not_quadratic)?.solve(&d);
    let lhs = 0.5 * d.dot(&sol) - offset;
    Ok(ConjugacyReport { lhs, rhs, gap: lhs - rhs })
}

fn gaussian_sampler(mean: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma.nrows() != mean.len() || sigma.ncols() != mean.len() {
        return Err(Error::ShapeMismatch("covariance and mean differ in dimension".into()));
    }
    sigma
        .clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidArgument("covariance must be positive definite".into()))
}

fn draw(seed: u64, i: u64, mean: &DVector<f64>, chol: &DMatrix<f64>) -> DVector<f64> {
    let mut r = rng::stream(seed, i, 0);
    let z = DVector::from_fn(mean.len(), |_, _| r.sample::<f64, _>(StandardNormal));
    mean + chol * z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVarianceReport {
    /// `Tr Ĉov(u(X))`.
    pub trace_cov: f64,
    pub std_error: f64,
    pub bound: f64,
    pub samples: usize,
}

/// Trace of the covariance of `u(X)` for Gaussian `X`, against
/// `n σ₀ μ_ω² σ_min(B)² / (2 (ℓ_f + ℓ_ω ‖B‖)²)`.
pub fn action_variance_check(
    f: &ConvexFn,
    omega: &ConvexFn,
    b: &DMatrix<f64>,
    mean: &DVector<f64>,
    sigma: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<ActionVarianceReport> {
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let ell_f = f.ell().ok_or_else(|| Error::CertificateMissing("f has no smoothness bound".into()))?;
    let ell_w = omega.ell().ok_or_else(|| Error::CertificateMissing("ω has no smoothness bound".into()))?;
    let chol = gaussian_sampler(mean, sigma)?;
    let us: Vec<DVector<f64>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| infimal_convolution(f, omega, b, &draw(seed, i, mean, &chol)).map(|r| r.1))
        .collect::<Result<_>>()?;
    let k = samples as f64;
    let ubar = us.iter().fold(DVector::zeros(f.dim()), |acc, u| acc + u) / k;
    let sq: Vec<f64> = us.iter().map(|u| (u - &ubar).norm_squared()).collect();
    let mean_sq = sq.iter().sum::<f64>() / k;
    let var_sq = sq.iter().map(|s| (s - mean_sq).powi(2)).sum::<f64>() / (k - 1.0);
    let n = mean.len() as f64;
    let bound = n * min_eigenvalue(sigma) * omega.mu().powi(2) * min_singular(b).powi(2)
        / (2.0 * (ell_f + ell_w * op_norm(b)).powi(2));
    Ok(ActionVarianceReport { trace_cov: mean_sq * k / (k - 1.0), std_error: (var_sq / k).sqrt(), bound, samples })
}

/// User-supplied monotonicity and Lipschitz constants of a gradient map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    pub gamma: f64,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassthroughReport {
    /// `λ_min(Ĉov(g(X)))`.
    pub min_eig: f64,
    pub std_error: f64,
    /// `μ γ²` with `μ = λ_min(Σ)`.
    pub bound: f64,
    pub probe_mu: f64,
    pub probe_ell: f64,
    pub samples: usize,
}

/// Covariance of `g(X) = ∇φ(X)` for Gaussian `X`, against `μ γ²`.
///
/// The certificates are probed by random secants over `mean ± 4 sd`; a
/// probe that contradicts them is reported as a missing certificate.
pub fn variance_passthrough_check(
    phi: &ConvexFn,
    certs: Option<Certificates>,
    mean: &DVector<f64>,
    sigma: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<PassthroughReport> {
    let certs = certs.ok_or_else(|| Error::CertificateMissing("γ and L must be supplied".into()))?;
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let chol = gaussian_sampler(mean, sigma)?;
    let sd = DVector::from_fn(mean.len(), |i, _| 4.0 * sigma[(i, i)].sqrt());
    let (probe_mu, probe_ell) = curvature_probe(|x| phi.grad(x), &(mean - &sd), &(mean + &sd), 2000, seed);
    if probe_mu < certs.gamma - 1e-6 || probe_ell > certs.lipschitz + 1e-6 {
        return Err(Error::CertificateMissing(format!(
            "probe found curvature in [{probe_mu:.6}, {probe_ell:.6}], outside certified [{}, {}]",
            certs.gamma, certs.lipschitz
        )));
    }
    let gs: Vec<DVector<f64>> =
        (0..samples as u64).into_par_iter().map(|i| phi.grad(&draw(seed, i, mean, &chol))).collect();
    let k = samples as f64;
    let d = mean.len();
    let gbar = gs.iter().fold(DVector::zeros(d), |acc, g| acc + g) / k;
    let cov = gs.iter().fold(DMatrix::zeros(d, d), |acc, g| {
        let c = g - &gbar;
        acc + &c * c.transpose()
    }) / (k - 1.0);
    let eig = cov.symmetric_eigen();
    let (imin, &min_eig) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    let v = eig.eigenvectors.column(imin).into_owned();
    let proj: Vec<f64> = gs.iter().map(|g| (g - &gbar).dot(&v).powi(2)).collect();
    let pm = proj.iter().sum::<f64>() / k;
    let pv = proj.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(PassthroughReport {
        min_eig,
        std_error: (pv / k).sqrt(),
        bound: min_eigenvalue(sigma) * certs.gamma.powi(2),
        probe_mu,
        probe_ell,
        samples,
    })
}
