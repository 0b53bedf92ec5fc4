//! Conditioning of jointly Gaussian vectors.

use nalgebra::DMatrix;

use crate::linalg::symmetrize;

/// Result of conditioning targets on observations in a zero-mean Gaussian.
#[derive(Debug, Clone)]
pub struct Conditioned {
    /// `E[target | obs] = coef · obs`.
    pub coef: DMatrix<f64>,
    /// `Cov(target | obs)`, independent of the observed values.
    pub cov: DMatrix<f64>,
}

fn select(cov: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])])
}

/// Conditions the coordinates `target` on `obs` under joint covariance `cov`.
/// Singular observation covariances are handled by a pseudo-inverse.
pub fn condition(cov: &DMatrix<f64>, target: &[usize], obs: &[usize]) -> Conditioned {
    let stt = select(cov, target, target);
    if obs.is_empty() {
        return Conditioned { coef: DMatrix::zeros(target.len(), 0), cov: stt };
    }
    let sto = select(cov, target, obs);
    let soo = symmetrize(&select(cov, obs, obs));
    let pinv = soo
        .clone()
        .pseudo_inverse(1e-12 * soo.abs().max().max(1e-300))
        .expect("pseudo-inverse of a symmetric matrix");
    let coef = &sto * pinv;
    let c = symmetrize(&(stt - &coef * sto.transpose()));
    Conditioned { coef, cov: c }
}

/// Conditions a linear-Gaussian latent model. Latents are independent with
/// variances `var`; targets are `tmap · z`, observations `omap · z`.
pub fn condition_latent(var: &[f64], tmap: &DMatrix<f64>, omap: &DMatrix<f64>) -> Conditioned {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(var));
    let stacked = {
        let (nt, no, nz) = (tmap.nrows(), omap.nrows(), tmap.ncols());
        let mut g = DMatrix::zeros(nt + no, nz);
        g.view_mut((0, 0), (nt, nz)).copy_from(tmap);
        g.view_mut((nt, 0), (no, nz)).copy_from(omap);
        g
    };
    let joint = &stacked * d * stacked.transpose();
    let t: Vec<usize> = (0..tmap.nrows()).collect();
    let o: Vec<usize> = (tmap.nrows()..tmap.nrows() + omap.nrows()).collect();
    condition(&joint, &t, &o)
}
