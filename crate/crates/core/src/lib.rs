//! Disturbance-adaptive data-driven predictive control.
//!
//! The crate is organised bottom-up:
//!
//! * [`trajdata`] stores I/O trajectories and builds Hankel matrices,
//! * [`predictor`] turns a Hankel bundle into an affine multi-step predictor,
//! * [`qpsolve`] is a dense convex QP solver,
//! * [`conformal`] calibrates per-step output disturbance bounds,
//! * [`rbdpc`] assembles and solves the tightened receding-horizon problem,
//! * [`supervisor`] adapts the disturbance level from observed violations and
//!   switches to a backup controller when needed,
//! * [`plant`] simulates a small RC thermal building with weather and comfort schedules,
//! * [`harness`] wires everything into closed-loop runs, sweeps and certificate checks.

pub mod conformal;
pub mod harness;
pub mod par;
pub mod plant;
pub mod predictor;
pub mod qpsolve;
pub mod rbdpc;
pub mod supervisor;
pub mod trajdata;
