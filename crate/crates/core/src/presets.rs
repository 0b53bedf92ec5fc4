//! Named systems used throughout the examples and tests.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::lqr::{dare, LtvSystem};

/// `A=[[1,0.1],[0,1]]`, `B=[0;0.1]`, `Q=I`, `R=1`, terminal cost at the
/// stationary Riccati solution, `x0=0`.
pub fn double_integrator(horizon: usize) -> Result<LtvSystem> {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::identity(1, 1);
    let p = dare(&a, &b, &q, &r)?;
    LtvSystem::time_invariant(a, b, q, r, p, DVector::zeros(2), horizon)
}

/// `A=B=Q=R=1` with the stationary terminal cost `(1+√5)/2`.
pub fn scalar_unit(horizon: usize) -> Result<LtvSystem> {
    let one = DMatrix::from_element(1, 1, 1.0);
    let p = dare(&one, &one, &one, &one)?;
    LtvSystem::time_invariant(one.clone(), one.clone(), one.clone(), one, p, DVector::zeros(1), horizon)
}

/// `x_{t+1} = u_t + w_t`, stage cost `x²`, no input cost, terminal `x²`.
pub fn binary_example(horizon: usize) -> Result<LtvSystem> {
    let one = DMatrix::from_element(1, 1, 1.0);
    let zero = DMatrix::zeros(1, 1);
    LtvSystem::new_semidefinite(
        vec![zero.clone(); horizon],
        vec![one.clone(); horizon],
        vec![one.clone(); horizon],
        vec![zero; horizon],
        one,
        DVector::zeros(1),
    )
}

/// Open-loop stable scalar system `A=0.5`, `B=Q=R=P_T=1`.
pub fn stable_scalar(horizon: usize) -> Result<LtvSystem> {
    let one = DMatrix::from_element(1, 1, 1.0);
    LtvSystem::time_invariant(
        DMatrix::from_element(1, 1, 0.5),
        one.clone(),
        one.clone(),
        one.clone(),
        one,
        DVector::zeros(1),
        horizon,
    )
}

/// The anisotropic prediction map `[[1, 0.99], [0, 0.141]]`.
pub fn rotated_theta() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, 0.99, 0.0, 0.141])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetInfo {
    pub name: &'static str,
    pub description: &'static str,
}

pub const PRESETS: &[PresetInfo] = &[
    PresetInfo {
        name: "double-integrator",
        description: "A=[[1,0.1],[0,1]], B=[0;0.1], Q=I, R=1, stationary terminal cost",
    },
    PresetInfo { name: "scalar-unit", description: "A=B=Q=R=1, stationary terminal cost (1+sqrt5)/2" },
    PresetInfo {
        name: "binary-example",
        description: "x_{t+1}=u_t+w_t, stage cost x^2, terminal x^2, w uniform on {-1,+1}",
    },
    PresetInfo { name: "stable-scalar", description: "A=0.5, B=Q=R=P_T=1" },
];

pub fn by_name(name: &str, horizon: usize) -> Option<Result<LtvSystem>> {
    match name {
        "double-integrator" => Some(double_integrator(horizon)),
        "scalar-unit" => Some(scalar_unit(horizon)),
        "binary-example" => Some(binary_example(horizon)),
        "stable-scalar" => Some(stable_scalar(horizon)),
        _ => None,
    }
}
