//! Robust data-driven predictive control problem.
//!
//! Decision variables are `x = [u_pred; δ]` (time-major). Outputs are
//! eliminated through the affine predictor `ŷ = f + Φ_u u_pred`, where `f`
//! collects the initial-trajectory and forecast terms. For each prediction
//! step `i` and output `j` the comfort band of step `t + 1 + i` is tightened
//! by the conformal half-width `d_ij(σ)` and softened by `δ_ij ≥ 0`:
//!
//! ```text
//! ŷ_ij ≥ lb_ij + d_ij − δ_ij,     ŷ_ij ≤ ub_ij − d_ij + δ_ij  (finite ub only)
//! ```
//!
//! The objective is `Σ c'u + u'diag(quad_u)u + Q_δ‖δ‖²`.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{ConformalError, QuantileTable};
use crate::plant::{ComfortSchedule, PlantError};
use crate::predictor::{AffinePredictor, PredictorError};
use crate::qpsolve::{self, QpError, QpProblem, QpSettings, QpStatus};

#[derive(Debug, Error)]
pub enum RbdpcError {
    #[error("sigma {0} outside (0, 1]")]
    SigmaOutOfRange(f64),
    #[error(transparent)]
    Schedule(#[from] PlantError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("QP reported infeasible")]
    Infeasible,
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
}

/// Stage cost. Vectors are either one entry per input (broadcast over the
/// horizon) or one entry per input and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostSpec {
    pub linear_u: Vec<f64>,
    pub quad_u: Vec<f64>,
    pub q_delta: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            linear_u: vec![1.0],
            quad_u: Vec::new(),
            q_delta: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSet {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

/// Borrowed problem data shared by [`build_ocp`] and [`policy`].
#[derive(Debug, Clone, Copy)]
pub struct OcpSetup<'a> {
    pub predictor: &'a AffinePredictor,
    pub table: &'a QuantileTable,
    pub schedule: &'a ComfortSchedule,
    pub cost: &'a CostSpec,
    pub inputs: &'a InputSet,
}

#[derive(Debug, Clone)]
pub struct BuiltOcp {
    pub qp: QpProblem,
    /// Free response `f` of the predictor.
    pub free: DVector<f64>,
    pub n_u_vars: usize,
    pub n_slacks: usize,
}

#[derive(Debug, Clone)]
pub struct OcpResult {
    pub u_first: Vec<f64>,
    pub u_plan: DVector<f64>,
    pub y_plan: DVector<f64>,
    pub slacks: DVector<f64>,
    pub objective: f64,
    pub qp_status: QpStatus,
    pub solve_time: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub active_set_size: usize,
}

impl OcpResult {
    pub fn slack_norm(&self) -> f64 {
        self.slacks.norm()
    }

    pub fn diagnostic(&self, t: i64, sigma: f64) -> Diagnostic {
        Diagnostic {
            t,
            sigma,
            objective: self.objective,
            slack_norm: self.slack_norm(),
            slack_max: self.slacks.amax(),
            active_set_size: self.active_set_size,
            iterations: self.iterations,
            kkt_residual: self.kkt_residual,
            status: self.qp_status,
            solve_time: self.solve_time,
        }
    }
}

/// Per-step JSON diagnostic line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub t: i64,
    pub sigma: f64,
    pub objective: f64,
    pub slack_norm: f64,
    pub slack_max: f64,
    pub active_set_size: usize,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub status: QpStatus,
    pub solve_time: f64,
}

fn expand(v: &[f64], per_step: usize, horizon: usize, what: &str, default: f64) -> Result<Vec<f64>, RbdpcError> {
    match v.len() {
        0 => Ok(vec![default; per_step * horizon]),
        n if n == per_step => Ok(v.iter().copied().cycle().take(per_step * horizon).collect()),
        n if n == per_step * horizon => Ok(v.to_vec()),
        n => Err(RbdpcError::DimensionMismatch(format!(
            "{what} has {n} entries, expected {per_step} or {}",
            per_step * horizon
        ))),
    }
}

/// Assembles the tightened QP at level `sigma` for decision time `t`.
pub fn build_ocp(
    setup: &OcpSetup<'_>,
    sigma: f64,
    t: i64,
    z: &DVector<f64>,
    w_pred: &DVector<f64>,
) -> Result<BuiltOcp, RbdpcError> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(RbdpcError::SigmaOutOfRange(sigma));
    }
    let p = setup.predictor;
    let (horizon, n_u, n_y) = (p.horizon, p.dims.n_u, p.dims.n_y);
    if setup.table.horizon() != horizon || setup.table.n_y() != n_y {
        return Err(RbdpcError::DimensionMismatch(format!(
            "quantile table is {}x{}, predictor needs {horizon}x{n_y}",
            setup.table.horizon(),
            setup.table.n_y()
        )));
    }
    let free = p.free_response(z, w_pred)?;
    let hw = setup.table.half_widths(sigma)?;
    let nu = horizon * n_u;
    let ns = horizon * n_y;
    let nv = nu + ns;

    let lin = expand(&setup.cost.linear_u, n_u, horizon, "linear_u", 0.0)?;
    let quad = expand(&setup.cost.quad_u, n_u, horizon, "quad_u", 0.0)?;
    let u_min = expand(&setup.inputs.u_min, n_u, horizon, "u_min", 0.0)?;
    let u_max = expand(&setup.inputs.u_max, n_u, horizon, "u_max", 0.0)?;
    if quad.iter().any(|v| !(*v >= 0.0)) || !(setup.cost.q_delta > 0.0) {
        return Err(RbdpcError::DimensionMismatch("quad_u must be PSD and Q_delta positive".into()));
    }
    if u_min.iter().zip(&u_max).any(|(a, b)| !(a <= b)) {
        return Err(RbdpcError::DimensionMismatch("u_min must not exceed u_max".into()));
    }

    let mut pm = DMatrix::zeros(nv, nv);
    let mut q = DVector::zeros(nv);
    for k in 0..nu {
        pm[(k, k)] = 2.0 * quad[k];
        q[k] = lin[k];
    }
    for k in nu..nv {
        pm[(k, k)] = 2.0 * setup.cost.q_delta;
    }

    // output rows: lower for every (i, j), upper where ub is finite
    let mut rows: Vec<(usize, f64, f64)> = Vec::with_capacity(2 * ns); // (r, sign, rhs)
    for i in 0..horizon {
        let band = setup.schedule.comfort_at(t + 1 + i as i64)?;
        if band.lb.len() != n_y {
            return Err(RbdpcError::DimensionMismatch(format!(
                "comfort band has {} outputs, predictor has {n_y}",
                band.lb.len()
            )));
        }
        for j in 0..n_y {
            let r = i * n_y + j;
            // -(f + Φu) - δ ≤ -(lb + d)
            rows.push((r, -1.0, free[r] - band.lb[j] - hw[r]));
            if band.ub[j].is_finite() {
                // (f + Φu) - δ ≤ ub - d
                rows.push((r, 1.0, band.ub[j] - hw[r] - free[r]));
            }
        }
    }
    let m_out = rows.len();
    let m = m_out + 2 * nu + ns;
    let mut g = DMatrix::zeros(m, nv);
    let mut h = DVector::zeros(m);
    for (k, &(r, sign, rhs)) in rows.iter().enumerate() {
        for c in 0..nu {
            g[(k, c)] = sign * p.phi_u[(r, c)];
        }
        g[(k, nu + r)] = -1.0;
        h[k] = rhs;
    }
    for c in 0..nu {
        g[(m_out + 2 * c, c)] = 1.0;
        h[m_out + 2 * c] = u_max[c];
        g[(m_out + 2 * c + 1, c)] = -1.0;
        h[m_out + 2 * c + 1] = -u_min[c];
    }
    for s in 0..ns {
        g[(m_out + 2 * nu + s, nu + s)] = -1.0;
    }
    let qp = QpProblem::inequality(pm, q, g, h)?;
    Ok(BuiltOcp {
        qp,
        free,
        n_u_vars: nu,
        n_slacks: ns,
    })
}

/// Solves the tightened problem and returns the first input of the plan.
pub fn policy(
    setup: &OcpSetup<'_>,
    sigma: f64,
    t: i64,
    z: &DVector<f64>,
    w_pred: &DVector<f64>,
    settings: &QpSettings,
) -> Result<OcpResult, RbdpcError> {
    let ocp = build_ocp(setup, sigma, t, z, w_pred)?;
    let start = Instant::now();
    let sol = qpsolve::solve(&ocp.qp, settings)?;
    let solve_time = start.elapsed().as_secs_f64();
    match sol.status {
        QpStatus::Infeasible => return Err(RbdpcError::Infeasible),
        QpStatus::MaxIter => warn!(
            "OCP at t={t} hit the iteration limit (kkt {:.2e}); applying best iterate",
            sol.kkt_residual
        ),
        QpStatus::Optimal => {}
    }
    let n_u = setup.predictor.dims.n_u;
    let u_plan = sol.x.rows(0, ocp.n_u_vars).into_owned();
    let slacks = sol.x.rows(ocp.n_u_vars, ocp.n_slacks).map(|v| v.max(0.0));
    let y_plan = &ocp.free + &setup.predictor.phi_u * &u_plan;
    let slack_g = &ocp.qp.g * &sol.x - &ocp.qp.h;
    let active_set_size = slack_g.iter().filter(|v| **v > -1e-6).count();
    // only solver-tolerance level clamping
    let lo = expand(&setup.inputs.u_min, n_u, 1, "u_min", 0.0)?;
    let hi = expand(&setup.inputs.u_max, n_u, 1, "u_max", 0.0)?;
    let u_first = (0..n_u).map(|k| u_plan[k].clamp(lo[k], hi[k])).collect();
    Ok(OcpResult {
        u_first,
        objective: ocp.qp.objective(&sol.x),
        u_plan,
        y_plan,
        slacks,
        qp_status: sol.status,
        solve_time,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        active_set_size,
    })
}
