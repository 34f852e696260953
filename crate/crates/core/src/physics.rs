//! PDE/ODE residual operators: the Van der Pol oscillator and the 2-D steady
//! RANS equations with unknown Reynolds-force closure fields.

use serde::{Deserialize, Serialize};

use crate::autodiff::{evaluate_with_input_derivatives, DualTrace};
use crate::error::{CoreError, Result};
use crate::network::{NetworkSpec, ParamVector};

/// Van der Pol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VdpParams {
    /// Damping strength (dimensionless).
    pub epsilon: f64,
    /// Natural frequency (1/time).
    pub omega0: f64,
}

impl VdpParams {
    pub fn paper_defaults() -> Self {
        Self {
            epsilon: 1.0,
            omega0: 15.0,
        }
    }
}

/// All field values and derivatives entering the RANS residuals at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RansFieldsAtPoint {
    pub u: f64,
    pub v: f64,
    pub p: f64,
    pub f_x: f64,
    pub f_y: f64,
    pub u_x: f64,
    pub u_y: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub u_xx: f64,
    pub u_yy: f64,
    pub v_xx: f64,
    pub v_yy: f64,
    pub re: f64,
}

/// Van der Pol residual: `u'' - eps*omega*(1 - u^2)*u' + omega^2*u`.
pub fn vdp_residual(u: f64, u_dot: f64, u_ddot: f64, p: &VdpParams) -> f64 {
    u_ddot - p.epsilon * p.omega0 * (1.0 - u * u) * u_dot + p.omega0 * p.omega0 * u
}

/// Steady incompressible RANS residuals (x-momentum, y-momentum, continuity).
/// The closure terms enter with a plus sign.
pub fn rans_residuals(f: &RansFieldsAtPoint) -> (f64, f64, f64) {
    let nu = 1.0 / f.re;
    let r1 = f.u * f.u_x + f.v * f.u_y + f.p_x - nu * (f.u_xx + f.u_yy) + f.f_x;
    let r2 = f.u * f.v_x + f.v * f.v_y + f.p_y - nu * (f.v_xx + f.v_yy) + f.f_y;
    let r3 = f.u_x + f.v_y;
    (r1, r2, r3)
}

/// Which residual operator a network's outputs feed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Problem {
    /// Single-output network `u(t)`. `residual_scale` multiplies the residual
    /// before it enters any likelihood or loss (the Van der Pol experiments
    /// use 1e-4 for numerical stability).
    Vdp {
        params: VdpParams,
        residual_scale: f64,
    },
    /// Five-output network `(U, V, P, f_x, f_y)` over `(x, y)`.
    Rans { re: f64 },
}

impl Problem {
    pub fn n_residuals(&self) -> usize {
        match self {
            Problem::Vdp { .. } => 1,
            Problem::Rans { .. } => 3,
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            Problem::Vdp { .. } => 1,
            Problem::Rans { .. } => 5,
        }
    }

    /// Residuals from the output jets at one point.
    pub fn residuals_from_traces(&self, traces: &[DualTrace]) -> Vec<f64> {
        match self {
            Problem::Vdp {
                params,
                residual_scale,
            } => {
                let u = traces[0].value;
                let u_dot = traces[0].input_tangents[0];
                let u_ddot = traces[0].second_tangents[0];
                vec![residual_scale * vdp_residual(u, u_dot, u_ddot, params)]
            }
            Problem::Rans { re } => {
                let f = rans_fields_from_traces(traces, *re);
                let (r1, r2, r3) = rans_residuals(&f);
                vec![r1, r2, r3]
            }
        }
    }
}

/// Assemble the RANS field bundle from output jets (order U, V, P, f_x, f_y;
/// directions x = 0, y = 1).
pub fn rans_fields_from_traces(tr: &[DualTrace], re: f64) -> RansFieldsAtPoint {
    RansFieldsAtPoint {
        u: tr[0].value,
        v: tr[1].value,
        p: tr[2].value,
        f_x: tr[3].value,
        f_y: tr[4].value,
        u_x: tr[0].input_tangents[0],
        u_y: tr[0].input_tangents[1],
        v_x: tr[1].input_tangents[0],
        v_y: tr[1].input_tangents[1],
        p_x: tr[2].input_tangents[0],
        p_y: tr[2].input_tangents[1],
        u_xx: tr[0].second_tangents[0],
        u_yy: tr[0].second_tangents[1],
        v_xx: tr[1].second_tangents[0],
        v_yy: tr[1].second_tangents[1],
        re,
    }
}

/// Residual tuples of a network at a batch of points; output order matches
/// input order.
pub fn residual_batch(
    net: &NetworkSpec,
    params: &ParamVector,
    points: &[Vec<f64>],
    problem: &Problem,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(points.len());
    for (i, x) in points.iter().enumerate() {
        let traces = evaluate_with_input_derivatives(net, params, x)?;
        let r = problem.residuals_from_traces(&traces);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteResidual { point: i });
        }
        out.push(r);
    }
    Ok(out)
}
