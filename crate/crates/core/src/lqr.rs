//! Time-varying LQR: Riccati recursion, optimal predictive feedforward and the
//! closed-form prediction power.
//!
//! With `M_t = R_t + B_tᵀ P_{t+1} B_t`, the recursion is
//!
//! ```text
//! H_t = B_t M_t⁻¹ B_tᵀ
//! P_t = Q_t + A_tᵀ P_{t+1} A_t − A_tᵀ P_{t+1} H_t P_{t+1} A_t
//! K_t = M_t⁻¹ B_tᵀ P_{t+1} A_t
//! ```
//!
//! and the optimal predictive action is `−K_t x + ū_t` with
//! `ū_t = −M_t⁻¹ B_tᵀ Σ_{τ≥t} Φ_{τ+1,t+1}ᵀ P_{τ+1} w_{τ|t}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, spd_inverse, symmetrize, trace_product};
use crate::predictors::{PredictorModel, WindowCov};

/// Condition-number limit for `R_t + B_tᵀ P_{t+1} B_t`.
pub const COND_LIMIT: f64 = 1e12;
/// Smallest eigenvalue accepted as positive.
pub const PD_TOL: f64 = 1e-10;
/// Dense Φ storage budget, in floats.
const PHI_DENSE_BUDGET: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    pub horizon: usize,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub p_terminal: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl LtvSystem {
    /// Builds and validates a system with positive-definite costs.
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        p_terminal: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let s = Self::unchecked(a, b, q, r, p_terminal, x0);
        s.validate(true)?;
        Ok(s)
    }

    /// Like [`LtvSystem::new`] but only requires `R_t` to be positive
    /// semidefinite. Invertibility of `R_t + B_tᵀ P_{t+1} B_t` is still
    /// enforced by the Riccati solve.
    pub fn new_semidefinite(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        p_terminal: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let s = Self::unchecked(a, b, q, r, p_terminal, x0);
        s.validate(false)?;
        Ok(s)
    }

    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p_terminal: DMatrix<f64>,
        x0: DVector<f64>,
        horizon: usize,
    ) -> Result<Self> {
        Self::new(
            vec![a; horizon],
            vec![b; horizon],
            vec![q; horizon],
            vec![r; horizon],
            p_terminal,
            x0,
        )
    }

    fn unchecked(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        p_terminal: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Self {
        LtvSystem { horizon: a.len(), a, b, q, r, p_terminal, x0 }
    }

    pub fn n(&self) -> usize {
        self.x0.len()
    }

    pub fn m(&self) -> usize {
        self.b.first().map_or(0, |b| b.ncols())
    }

    fn validate(&self, strict_r: bool) -> Result<()> {
        let t = self.horizon;
        if t == 0 {
            return Err(Error::InvalidSystem("horizon must be positive".into()));
        }
        if self.b.len() != t || self.q.len() != t || self.r.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "sequence lengths A={} B={} Q={} R={}",
                t,
                self.b.len(),
                self.q.len(),
                self.r.len()
            )));
        }
        let (n, m) = (self.n(), self.m());
        if n == 0 || m == 0 {
            return Err(Error::DimensionMismatch("state and input dimensions must be positive".into()));
        }
        let shape = |mat: &DMatrix<f64>, r: usize, c: usize| mat.nrows() == r && mat.ncols() == c;
        if !shape(&self.p_terminal, n, n) {
            return Err(Error::DimensionMismatch("P_T must be n×n".into()));
        }
        check_symmetric_pd(&self.p_terminal, "P_T", true)?;
        for k in 0..t {
            if !shape(&self.a[k], n, n)
                || !shape(&self.b[k], n, m)
                || !shape(&self.q[k], n, n)
                || !shape(&self.r[k], m, m)
            {
                return Err(Error::DimensionMismatch(format!("matrix shapes at t={k}")));
            }
            check_symmetric_pd(&self.q[k], &format!("Q_{k}"), true)?;
            check_symmetric_pd(&self.r[k], &format!("R_{k}"), strict_r)?;
        }
        Ok(())
    }

    /// Quadratic stage cost `xᵀQ_t x + uᵀR_t u`.
    pub fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.q[t] * x)) + u.dot(&(&self.r[t] * u))
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p_terminal * x))
    }

    /// `A_t x + B_t u + w`.
    pub fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a[t] * x + &self.b[t] * u + w
    }

    /// True when every stage matrix equals the first one.
    pub fn is_time_invariant(&self) -> bool {
        (1..self.horizon).all(|k| {
            self.a[k] == self.a[0] && self.b[k] == self.b[0] && self.q[k] == self.q[0] && self.r[k] == self.r[0]
        })
    }
}

fn check_symmetric_pd(m: &DMatrix<f64>, name: &str, strict: bool) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 * m.abs().max().max(1.0) {
        return Err(Error::InvalidSystem(format!("{name} is not symmetric")));
    }
    let lo = min_eigenvalue(m);
    if strict && lo <= PD_TOL {
        return Err(Error::InvalidSystem(format!("{name} is not positive definite (min eigenvalue {lo:.3e})")));
    }
    if !strict && lo < -PD_TOL {
        return Err(Error::InvalidSystem(format!("{name} is not positive semidefinite (min eigenvalue {lo:.3e})")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// `P_0, …, P_T`.
    pub p: Vec<DMatrix<f64>>,
    pub k: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    /// `M_t = R_t + B_tᵀ P_{t+1} B_t`.
    pub m: Vec<DMatrix<f64>>,
    pub m_inv: Vec<DMatrix<f64>>,
    /// Closed-loop matrices `A_t − B_t K_t`.
    pub closed_loop: Vec<DMatrix<f64>>,
    phi_dense: Option<Vec<DMatrix<f64>>>,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> usize {
        self.k.len()
    }

    pub fn n(&self) -> usize {
        self.p[0].nrows()
    }

    pub fn has_dense_phi(&self) -> bool {
        self.phi_dense.is_some()
    }

    /// `Φ_{t2,t1}`; the identity when `t2 ≤ t1`.
    pub fn phi(&self, t2: usize, t1: usize) -> DMatrix<f64> {
        let n = self.n();
        if t2 <= t1 {
            return DMatrix::identity(n, n);
        }
        assert!(t2 <= self.horizon(), "Φ index {t2} beyond horizon");
        if let Some(table) = &self.phi_dense {
            return table[tri_index(t2, t1)].clone();
        }
        let mut acc = DMatrix::identity(n, n);
        for s in t1..t2 {
            acc = &self.closed_loop[s] * acc;
        }
        acc
    }

    /// One CSV row per `t`: `t, P_t (row-major), K_t (row-major, empty at T)`.
    pub fn to_csv(&self) -> String {
        let n = self.n();
        let m = self.k.first().map_or(0, |k| k.nrows());
        let mut header = vec!["t".to_string()];
        for i in 0..n {
            for j in 0..n {
                header.push(format!("P_{i}{j}"));
            }
        }
        for i in 0..m {
            for j in 0..n {
                header.push(format!("K_{i}{j}"));
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        for t in 0..=self.horizon() {
            let mut row = vec![t.to_string()];
            for i in 0..n {
                for j in 0..n {
                    row.push(crate::io::fmt_f64(self.p[t][(i, j)]));
                }
            }
            for i in 0..m {
                for j in 0..n {
                    row.push(if t < self.horizon() { crate::io::fmt_f64(self.k[t][(i, j)]) } else { String::new() });
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn tri_index(t2: usize, t1: usize) -> usize {
    t2 * (t2 + 1) / 2 + t1
}

/// Backward Riccati recursion from `P_T`.
pub fn riccati_backward(system: &LtvSystem) -> Result<RiccatiSolution> {
    let horizon = system.horizon;
    let n = system.n();
    let mut p = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut k = Vec::with_capacity(horizon);
    let mut h = Vec::with_capacity(horizon);
    let mut mm = Vec::with_capacity(horizon);
    let mut m_inv = Vec::with_capacity(horizon);
    let mut closed = Vec::with_capacity(horizon);
    p[horizon] = symmetrize(&system.p_terminal);
    for t in (0..horizon).rev() {
        let (a, b) = (&system.a[t], &system.b[t]);
        let pn = &p[t + 1];
        let bt_p = b.transpose() * pn;
        let m_t = symmetrize(&(&system.r[t] + &bt_p * b));
        let (inv, cond) = spd_inverse(&m_t, COND_LIMIT);
        let inv = inv.ok_or(Error::NonInvertible { t, cond })?;
        let k_t = &inv * &bt_p * a;
        let h_t = symmetrize(&(b * &inv * b.transpose()));
        let pa = pn * a;
        let p_t = &system.q[t] + a.transpose() * &pa - pa.transpose() * &h_t * &pa;
        p[t] = symmetrize(&p_t);
        closed.push(a - b * &k_t);
        k.push(k_t);
        h.push(h_t);
        mm.push(m_t);
        m_inv.push(inv);
    }
    k.reverse();
    h.reverse();
    mm.reverse();
    m_inv.reverse();
    closed.reverse();
    let entries = (horizon + 1) * (horizon + 2) / 2;
    let phi_dense = if n <= 4 && entries.saturating_mul(n * n) <= PHI_DENSE_BUDGET {
        let mut table = Vec::with_capacity(entries);
        for t2 in 0..=horizon {
            for t1 in 0..=t2 {
                if t1 == t2 {
                    table.push(DMatrix::identity(n, n));
                } else {
                    let prev: &DMatrix<f64> = &table[tri_index(t2 - 1, t1)];
                    table.push(&closed[t2 - 1] * prev);
                }
            }
        }
        Some(table)
    } else {
        None
    };
    Ok(RiccatiSolution { p, k, h, m: mm, m_inv, closed_loop: closed, phi_dense })
}

/// Fixed point of the time-invariant recursion, iterated from `Q` until the
/// update falls below `1e−12`.
pub fn dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    let max_iter = 1_000_000;
    for it in 0..max_iter {
        let bt_p = b.transpose() * &p;
        let m = symmetrize(&(r + &bt_p * b));
        let (inv, cond) = spd_inverse(&m, COND_LIMIT);
        let inv = inv.ok_or(Error::NonInvertible { t: it, cond })?;
        let pa = &p * a;
        let next = symmetrize(&(q + a.transpose() * &pa - pa.transpose() * b * &inv * b.transpose() * &pa));
        let delta = (&next - &p).abs().max();
        p = next;
        if delta < 1e-12 * p.abs().max().max(1.0) {
            return Ok(p);
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: f64::NAN })
}

fn check_t(riccati: &RiccatiSolution, t: usize) -> Result<()> {
    if t >= riccati.horizon() {
        return Err(Error::UnsupportedTarget { target: t, horizon: riccati.horizon() });
    }
    Ok(())
}

/// `−M_t⁻¹ B_tᵀ Σ_j Φ_{start+j+1,t+1}ᵀ P_{start+j+1} w_j` for a window of
/// conditional means starting at `start ≥ t`. Means past the window are zero.
pub fn feedforward_window(
    riccati: &RiccatiSolution,
    system: &LtvSystem,
    t: usize,
    start: usize,
    means: &[DVector<f64>],
) -> Result<DVector<f64>> {
    check_t(riccati, t)?;
    let n = system.n();
    if start < t || start + means.len() > system.horizon {
        return Err(Error::DimensionMismatch(format!(
            "mean window [{start}, {}) outside [{t}, {})",
            start + means.len(),
            system.horizon
        )));
    }
    let mut phi = riccati.phi(start + 1, t + 1);
    let mut acc = DVector::zeros(n);
    for (j, w) in means.iter().enumerate() {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!("mean has length {}, expected {n}", w.len())));
        }
        let tau = start + j;
        if j > 0 {
            phi = &riccati.closed_loop[tau] * phi;
        }
        acc += phi.transpose() * (&riccati.p[tau + 1] * w);
    }
    Ok(-(&riccati.m_inv[t] * (system.b[t].transpose() * acc)))
}

/// Optimal predictive feedforward from the means `w_{τ|t}`, `τ = t..T−1`.
pub fn optimal_feedforward(
    riccati: &RiccatiSolution,
    system: &LtvSystem,
    t: usize,
    cond_means: &[DVector<f64>],
) -> Result<DVector<f64>> {
    check_t(riccati, t)?;
    if cond_means.len() != system.horizon - t {
        return Err(Error::DimensionMismatch(format!(
            "expected {} conditional means, got {}",
            system.horizon - t,
            cond_means.len()
        )));
    }
    feedforward_window(riccati, system, t, t, cond_means)
}

pub fn optimal_action(
    riccati: &RiccatiSolution,
    system: &LtvSystem,
    t: usize,
    x: &DVector<f64>,
    cond_means: &[DVector<f64>],
) -> Result<DVector<f64>> {
    if x.len() != system.n() {
        return Err(Error::DimensionMismatch("state length".into()));
    }
    Ok(-(&riccati.k[t] * x) + optimal_feedforward(riccati, system, t, cond_means)?)
}

/// The feedforward an oracle would apply knowing the realized `w_{t..T−1}`.
pub fn surrogate_optimal_action(
    riccati: &RiccatiSolution,
    system: &LtvSystem,
    t: usize,
    w_realized: &[DVector<f64>],
) -> Result<DVector<f64>> {
    optimal_feedforward(riccati, system, t, w_realized)
}

/// Backward accumulator `g_t = P_{t+1} w_t + (A_{t+1} − B_{t+1}K_{t+1})ᵀ g_{t+1}`,
/// so that the surrogate action is `−M_t⁻¹ B_tᵀ g_t`.
pub fn accumulate_backward(
    riccati: &RiccatiSolution,
    t: usize,
    w_t: &DVector<f64>,
    g_next: Option<&DVector<f64>>,
) -> DVector<f64> {
    let mut g = &riccati.p[t + 1] * w_t;
    if let Some(gn) = g_next {
        g += riccati.closed_loop[t + 1].transpose() * gn;
    }
    g
}

/// Surrogate-optimal actions for every `t` in O(T).
pub fn surrogate_actions_all(
    riccati: &RiccatiSolution,
    system: &LtvSystem,
    w: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let horizon = system.horizon;
    if w.len() != horizon {
        return Err(Error::DimensionMismatch(format!("expected {horizon} disturbances, got {}", w.len())));
    }
    let mut out = vec![DVector::zeros(system.m()); horizon];
    let mut g: Option<DVector<f64>> = None;
    for t in (0..horizon).rev() {
        let next = accumulate_backward(riccati, t, &w[t], g.as_ref());
        out[t] = -(&riccati.m_inv[t] * (system.b[t].transpose() * &next));
        g = Some(next);
    }
    Ok(out)
}

/// Covariance of `Σ_j Φ_{start+j+1,t+1}ᵀ P_{start+j+1} w_j` for stacked `w`
/// with covariance `wc.cov`.
fn weighted_window_cov(riccati: &RiccatiSolution, t: usize, wc: &WindowCov) -> DMatrix<f64> {
    let n = riccati.n();
    let mut f = Vec::with_capacity(wc.blocks);
    let mut phi = riccati.phi(wc.start + 1, t + 1);
    for j in 0..wc.blocks {
        let tau = wc.start + j;
        if j > 0 {
            phi = &riccati.closed_loop[tau] * phi;
        }
        f.push(phi.transpose() * &riccati.p[tau + 1]);
    }
    let mut g = DMatrix::zeros(n, n);
    for (j, fj) in f.iter().enumerate() {
        for (k, fk) in f.iter().enumerate() {
            let c = wc.cov.view((j * n, k * n), (n, n));
            g += fj * c * fk.transpose();
        }
    }
    symmetrize(&g)
}

fn check_model(system: &LtvSystem, model: &PredictorModel) -> Result<()> {
    if model.n() != system.n() {
        return Err(Error::DimensionMismatch(format!(
            "predictor disturbance dimension {} vs state dimension {}",
            model.n(),
            system.n()
        )));
    }
    if model.horizon() != system.horizon {
        return Err(Error::DimensionMismatch(format!(
            "predictor horizon {} vs system horizon {}",
            model.horizon(),
            system.horizon
        )));
    }
    Ok(())
}

/// Per-step terms `Tr{M_t E[Cov(ū_t^θ | F_t(0))]}`.
pub fn prediction_power_terms(
    system: &LtvSystem,
    riccati: &RiccatiSolution,
    model: &PredictorModel,
) -> Result<Vec<f64>> {
    check_model(system, model)?;
    (0..system.horizon)
        .map(|t| {
            Ok(match model.explained_covariance(t)? {
                Some(wc) => trace_product(&riccati.h[t], &weighted_window_cov(riccati, t, &wc)),
                None => 0.0,
            })
        })
        .collect()
}

/// Closed-form prediction power `Σ_t Tr{M_t E[Cov(ū_t^θ | F_t(0))]}`.
pub fn prediction_power_closed_form(
    system: &LtvSystem,
    riccati: &RiccatiSolution,
    model: &PredictorModel,
) -> Result<f64> {
    Ok(prediction_power_terms(system, riccati, model)?.iter().sum())
}

/// Same quantity through `E[Cov(ū*|I_t(0))] − E[Cov(ū*|I_t(θ))]`, using the
/// joint conditional covariances of the disturbances.
pub fn prediction_power_closed_form_residual(
    system: &LtvSystem,
    riccati: &RiccatiSolution,
    model: &PredictorModel,
) -> Result<f64> {
    check_model(system, model)?;
    let mut total = 0.0;
    for t in 0..system.horizon {
        if let Some((baseline, theta)) = model.residual_covariances(t)? {
            let g0 = weighted_window_cov(riccati, t, &baseline);
            let g1 = weighted_window_cov(riccati, t, &theta);
            total += trace_product(&riccati.h[t], &(g0 - g1));
        }
    }
    Ok(total)
}

/// Expected cost `x₀ᵀP₀x₀ + Σ_t Tr{P_{t+1} Cov(W_t)}` of the no-prediction
/// policy for zero-mean disturbances.
pub fn baseline_cost_closed_form(system: &LtvSystem, riccati: &RiccatiSolution, model: &PredictorModel) -> Result<f64> {
    check_model(system, model)?;
    let cov = model.disturbance_cov();
    let x0 = &system.x0;
    Ok(x0.dot(&(&riccati.p[0] * x0)) + (1..=system.horizon).map(|t| trace_product(&riccati.p[t], &cov)).sum::<f64>())
}

/// `E[Cov(ū_t^θ | F_t(0))]` as an `m×m` matrix.
pub fn feedforward_covariance(
    system: &LtvSystem,
    riccati: &RiccatiSolution,
    model: &PredictorModel,
    t: usize,
) -> Result<DMatrix<f64>> {
    check_model(system, model)?;
    check_t(riccati, t)?;
    let m = system.m();
    Ok(match model.explained_covariance(t)? {
        Some(wc) => {
            let g = weighted_window_cov(riccati, t, &wc);
            let left = &riccati.m_inv[t] * system.b[t].transpose();
            symmetrize(&(&left * g * left.transpose()))
        }
        None => DMatrix::zeros(m, m),
    })
}
