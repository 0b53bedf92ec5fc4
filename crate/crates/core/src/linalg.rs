//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    sym_eigenvalues(m).min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    sym_eigenvalues(m).max()
}

/// Inverse of a symmetric positive-definite matrix together with its
/// condition number. Returns `None` when the matrix is not PD or the
/// condition number exceeds `cond_limit`.
pub fn spd_inverse(m: &DMatrix<f64>, cond_limit: f64) -> (Option<DMatrix<f64>>, f64) {
    let s = symmetrize(m);
    let eig = sym_eigenvalues(&s);
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond.is_nan() || cond > cond_limit {
        return (None, cond);
    }
    match s.cholesky() {
        Some(ch) => (Some(symmetrize(&ch.inverse())), cond),
        None => (None, cond),
    }
}

/// Solves `a x = b` for SPD `a` by Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    symmetrize(a).cholesky().map(|ch| ch.solve(b))
}

/// Projects a symmetric matrix onto the PSD cone by clipping eigenvalues at 0.
pub fn psd_clip(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|x| x.max(0.0));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()))
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Spectral norm.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Smallest singular value.
pub fn min_singular(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

/// Stacks vectors as rows of a matrix.
pub fn rows_to_matrix(rows: &[DVector<f64>], width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j])
}

/// Solves the discrete Lyapunov equation `S = F S Fᵀ + N` by doubling.
/// Requires the spectral radius of `F` to be below one.
pub fn discrete_lyapunov(f: &DMatrix<f64>, n: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut s = n.clone();
    let mut a = f.clone();
    for _ in 0..64 {
        let next = &s + &a * &s * a.transpose();
        let delta = (&next - &s).abs().max();
        s = next;
        a = &a * &a;
        if !s.iter().all(|x| x.is_finite()) {
            return None;
        }
        if delta <= 1e-15 * s.abs().max().max(1.0) && a.abs().max() < 1e-12 {
            return Some(symmetrize(&s));
        }
    }
    None
}

/// `Tr(A B)` without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_inverse_roundtrip() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let (inv, cond) = spd_inverse(&m, 1e12);
        let inv = inv.unwrap();
        assert!((&m * &inv - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        assert!(cond > 1.0);
    }

    #[test]
    fn singular_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_inverse(&m, 1e12).0.is_none());
    }

    #[test]
    fn lyapunov_scalar() {
        let f = DMatrix::from_element(1, 1, 0.5);
        let n = DMatrix::from_element(1, 1, 1.0);
        let s = discrete_lyapunov(&f, &n).unwrap();
        assert!((s[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn clip_removes_negative_part() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let c = psd_clip(&m);
        assert!(min_eigenvalue(&c) >= -1e-15);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15);
    }
}
