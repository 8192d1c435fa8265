//! SIRS ordinary differential equation and its explicit Euler scheme.

use serde::{Deserialize, Serialize};

use crate::abm::ParamVector;
use crate::error::{Error, Result};

pub const DEFAULT_DT: f64 = 1.0;

/// Compartment proportions `(s, i, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeState {
    pub s: f64,
    pub i: f64,
    pub r: f64,
}

impl OdeState {
    pub fn new(s: f64, i: f64, r: f64) -> Self {
        Self { s, i, r }
    }

    /// `(1 - i0, i0, 0)`.
    pub fn seeded(i0: f64) -> Self {
        Self::new(1.0 - i0, i0, 0.0)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.s, self.i, self.r]
    }

    pub fn from_array(z: [f64; 3]) -> Self {
        Self::new(z[0], z[1], z[2])
    }

    pub fn mass(&self) -> f64 {
        self.s + self.i + self.r
    }

    pub fn in_simplex(&self) -> bool {
        self.s >= 0.0 && self.i >= 0.0 && self.r >= 0.0
    }
}

pub fn sirs_derivative(z: OdeState, theta: &ParamVector) -> [f64; 3] {
    rates(z.as_array(), theta.as_array())
}

fn rates(z: [f64; 3], th: [f64; 3]) -> [f64; 3] {
    let [s, i, r] = z;
    let [a, b, c] = th;
    let inf = a * i * s;
    let rec = b * i;
    let wane = c * r;
    [wane - inf, inf - rec, rec - wane]
}

/// `z + dt * rates(z, theta)`, grouped so that every term is nonnegative
/// whenever `theta` is in the unit cube and `dt <= 1`.
pub fn euler_update(z: [f64; 3], th: [f64; 3], dt: f64) -> [f64; 3] {
    let [s, i, r] = z;
    let [a, b, c] = th;
    [
        s * (1.0 - dt * a * i) + dt * c * r,
        i * (1.0 - dt * b) + dt * a * i * s,
        r * (1.0 - dt * c) + dt * b * i,
    ]
}

/// Trajectory `z_0..z_T` for rates given as raw triples (they may lie
/// outside the unit cube). The first state with a negative component is
/// reported as an error.
pub fn euler_solve_raw(z0: OdeState, thetas: &[[f64; 3]], dt: f64) -> Result<Vec<OdeState>> {
    let mut out = Vec::with_capacity(thetas.len() + 1);
    out.push(z0);
    let mut z = z0.as_array();
    for (t, th) in thetas.iter().enumerate() {
        z = euler_update(z, *th, dt);
        let state = OdeState::from_array(z);
        if !state.in_simplex() {
            return Err(Error::SimplexExcursion { step: t + 1, state: z });
        }
        out.push(state);
    }
    Ok(out)
}

pub fn euler_solve(z0: OdeState, thetas: &[ParamVector], dt: f64) -> Result<Vec<OdeState>> {
    let raw: Vec<[f64; 3]> = thetas.iter().map(ParamVector::as_array).collect();
    euler_solve_raw(z0, &raw, dt)
}
