//! Violation-rate supervisor.
//!
//! Tracks `α_t = α_{t−1} + η(α − v_t)` with truncation `ᾱ_t = clamp(α_t, 0, 1)`
//! and chooses between the tightened DPC policy at level `ᾱ_t` and the backup
//! controller. Step 0 measures `v_0` for the log but keeps `α_0`; the
//! recursion starts at `t = 1`.

use std::fmt;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::Band;
use crate::rbdpc::{OcpResult, RbdpcError};

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("non-finite output at step {0}")]
    NonFiniteOutput(i64),
    #[error("invalid supervisor parameters: {0}")]
    InvalidParams(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Dpc,
    Backup,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Dpc => "dpc",
            PolicyKind::Backup => "backup",
        })
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dpc" => Ok(PolicyKind::Dpc),
            "backup" => Ok(PolicyKind::Backup),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    UseDpc(f64),
    UseBackup,
}

/// Operating range and the backup's violation-recovery constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackupContract {
    pub delta_bar: usize,
    pub epsilon: f64,
    pub y_lim_lower: Vec<f64>,
    pub y_lim_upper: Vec<f64>,
}

impl BackupContract {
    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(self.y_lim_lower.iter().zip(&self.y_lim_upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Checks `ε ≤ α` and that `Y_lim` contains the comfort envelope.
    pub fn validate(&self, alpha: f64, envelope: &Band) -> Result<(), SupervisorError> {
        if self.delta_bar == 0 || !(0.0..=alpha).contains(&self.epsilon) {
            return Err(SupervisorError::InvalidParams(format!(
                "contract needs Δ̄ > 0 and 0 ≤ ε ≤ α, got Δ̄={} ε={}",
                self.delta_bar, self.epsilon
            )));
        }
        let inside = self.y_lim_lower.len() == envelope.lb.len()
            && self.y_lim_upper.len() == envelope.ub.len()
            && self.y_lim_lower.iter().zip(&envelope.lb).all(|(l, b)| l <= b)
            && self.y_lim_upper.iter().zip(&envelope.ub).all(|(u, b)| u >= b || !b.is_finite());
        if !inside {
            return Err(SupervisorError::InvalidParams(
                "Y_lim must contain every comfort band".into(),
            ));
        }
        Ok(())
    }
}

/// `1` iff some output lies strictly outside its band.
pub fn violation_indicator(y: &[f64], band: &Band) -> Result<u8, SupervisorError> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SupervisorError::NonFiniteOutput(-1));
    }
    Ok(u8::from(!band.contains(y)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorState {
    pub alpha_t: f64,
    pub alpha_bar: f64,
    pub alpha_target: f64,
    pub eta: f64,
    pub alpha_0: f64,
    pub violation_count: u64,
    pub step_count: u64,
    pub alpha_min_seen: f64,
    pub alpha_max_seen: f64,
    pub active_policy: PolicyKind,
    pub backup_run_length: u64,
    started: bool,
}

impl SupervisorState {
    pub fn new(alpha_target: f64, eta: f64, alpha_0: f64) -> Result<Self, SupervisorError> {
        if !(alpha_target > 0.0 && alpha_target <= 1.0) || !(eta > 0.0) || !(alpha_0 >= 0.0) || !alpha_0.is_finite() {
            return Err(SupervisorError::InvalidParams(format!(
                "need α ∈ (0,1], η > 0, α_0 ≥ 0; got α={alpha_target} η={eta} α_0={alpha_0}"
            )));
        }
        Ok(Self {
            alpha_t: alpha_0,
            alpha_bar: alpha_0.clamp(0.0, 1.0),
            alpha_target,
            eta,
            alpha_0,
            violation_count: 0,
            step_count: 0,
            alpha_min_seen: alpha_0,
            alpha_max_seen: alpha_0,
            active_policy: PolicyKind::Backup,
            backup_run_length: 0,
            started: false,
        })
    }

    pub fn update_alpha(&mut self, v: u8) {
        debug_assert!(v <= 1);
        self.alpha_t += self.eta * (self.alpha_target - v as f64);
        self.alpha_bar = self.alpha_t.clamp(0.0, 1.0);
        self.violation_count += v as u64;
        self.step_count += 1;
        self.alpha_min_seen = self.alpha_min_seen.min(self.alpha_t);
        self.alpha_max_seen = self.alpha_max_seen.max(self.alpha_t);
    }

    /// `α_t − α_0 − η(tα − Σv)`; zero up to rounding.
    pub fn recursion_defect(&self) -> f64 {
        let t = self.step_count as f64;
        self.alpha_t - self.alpha_0 - self.eta * (t * self.alpha_target - self.violation_count as f64)
    }

    pub fn select_input(&mut self, y: &[f64], contract: &BackupContract) -> Selection {
        if !contract.contains(y) || self.alpha_bar == 0.0 {
            self.active_policy = PolicyKind::Backup;
            self.backup_run_length += 1;
            Selection::UseBackup
        } else {
            self.active_policy = PolicyKind::Dpc;
            self.backup_run_length = 0;
            Selection::UseDpc(self.alpha_bar)
        }
    }

    /// One supervisory step at time `t` with measurement `y_t`.
    ///
    /// The backup closure is evaluated every step so that stateful backups
    /// (hysteresis) keep tracking the measurement; its output is applied only
    /// when selected. A failing DPC solve falls back to the backup input.
    pub fn step<D, B>(
        &mut self,
        t: i64,
        y_t: &[f64],
        w_t: &[f64],
        band: &Band,
        contract: &BackupContract,
        dpc: D,
        backup: B,
    ) -> Result<StepOutcome, SupervisorError>
    where
        D: FnOnce(f64) -> Result<OcpResult, RbdpcError>,
        B: FnOnce() -> Vec<f64>,
    {
        let v = violation_indicator(y_t, band).map_err(|_| SupervisorError::NonFiniteOutput(t))?;
        if self.started {
            self.update_alpha(v);
        }
        self.started = true;
        let selection = self.select_input(y_t, contract);
        let u_backup = backup();
        let (u, policy, ocp, incident) = match selection {
            Selection::UseBackup => (u_backup, PolicyKind::Backup, None, None),
            Selection::UseDpc(level) => match dpc(level) {
                Ok(res) => (res.u_first.clone(), PolicyKind::Dpc, Some(res), None),
                Err(e) => {
                    warn!("DPC failed at t={t}: {e}; applying backup input");
                    self.active_policy = PolicyKind::Backup;
                    self.backup_run_length += 1;
                    (u_backup, PolicyKind::Backup, None, Some(e.to_string()))
                }
            },
        };
        let record = StepRecord {
            t,
            y: y_t.to_vec(),
            u: u.clone(),
            w: w_t.to_vec(),
            v,
            alpha: self.alpha_t,
            alpha_bar: self.alpha_bar,
            policy,
            objective: ocp.as_ref().map(|r| r.objective),
            slack_norm: ocp.as_ref().map(|r| r.slack_norm()),
        };
        Ok(StepOutcome {
            u,
            record,
            ocp,
            incident,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub u: Vec<f64>,
    pub record: StepRecord,
    pub ocp: Option<OcpResult>,
    pub incident: Option<String>,
}

/// One audited step. `objective`/`slack_norm` are empty for backup steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: i64,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub v: u8,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub policy: PolicyKind,
    pub objective: Option<f64>,
    pub slack_norm: Option<f64>,
}

impl StepRecord {
    pub fn csv_header(n_y: usize, n_u: usize, n_w: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((0..n_y).map(|j| format!("y{j}")));
        h.extend((0..n_u).map(|j| format!("u{j}")));
        h.extend((0..n_w).map(|j| format!("w{j}")));
        h.extend(["v", "alpha", "alpha_bar", "policy", "objective", "slack_norm"].map(String::from));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut r = vec![self.t.to_string()];
        r.extend(self.y.iter().chain(&self.u).chain(&self.w).map(|v| v.to_string()));
        r.extend([
            self.v.to_string(),
            self.alpha.to_string(),
            self.alpha_bar.to_string(),
            self.policy.to_string(),
            opt(self.objective),
            opt(self.slack_norm),
        ]);
        r
    }
}

pub fn write_step_log<W: Write>(records: &[StepRecord], writer: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    if let Some(first) = records.first() {
        wtr.write_record(StepRecord::csv_header(first.y.len(), first.u.len(), first.w.len()))?;
    }
    for r in records {
        wtr.write_record(r.csv_row())?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses a step log written by [`write_step_log`].
pub fn read_step_log<R: std::io::Read>(reader: R) -> Result<Vec<StepRecord>, String> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    let count = |p: char| {
        header
            .iter()
            .filter(|h| h.len() > 1 && h.starts_with(p) && h[1..].bytes().all(|b| b.is_ascii_digit()))
            .count()
    };
    let (n_y, n_u, n_w) = (count('y'), count('u'), count('w'));
    if header.len() != 1 + n_y + n_u + n_w + 6 || header.get(0) != Some("t") {
        return Err(format!("unexpected log header {header:?}"));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        let bad = |what: &str| format!("row {line}: bad {what}");
        let num = |k: usize| -> Result<f64, String> { row.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| bad("number")) };
        let opt = |k: usize| -> Result<Option<f64>, String> {
            match row.get(k) {
                Some("") => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| bad("optional number")),
                None => Err(bad("column count")),
            }
        };
        let base = 1 + n_y + n_u + n_w;
        let v = row.get(base).and_then(|s| s.parse::<u8>().ok()).filter(|v| *v <= 1).ok_or_else(|| bad("v"))?;
        out.push(StepRecord {
            t: row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("t"))?,
            y: (1..1 + n_y).map(num).collect::<Result<_, _>>()?,
            u: (1 + n_y..1 + n_y + n_u).map(num).collect::<Result<_, _>>()?,
            w: (1 + n_y + n_u..base).map(num).collect::<Result<_, _>>()?,
            v,
            alpha: num(base + 1)?,
            alpha_bar: num(base + 2)?,
            policy: row.get(base + 3).ok_or_else(|| bad("policy"))?.parse()?,
            objective: opt(base + 4)?,
            slack_norm: opt(base + 5)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn contract() -> BackupContract {
        BackupContract {
            delta_bar: 96,
            epsilon: 0.05,
            y_lim_lower: vec![15.0],
            y_lim_upper: vec![30.0],
        }
    }

    #[test]
    fn indicator_is_boundary_inclusive() {
        let band = Band::uniform(1, 21.0, 25.0);
        assert_eq!(violation_indicator(&[21.0], &band).unwrap(), 0);
        assert_eq!(violation_indicator(&[20.9], &band).unwrap(), 1);
        let band2 = Band::uniform(2, 21.0, 25.0);
        assert_eq!(violation_indicator(&[22.0, 20.5], &band2).unwrap(), 1);
        assert!(violation_indicator(&[f64::NAN], &band).is_err());
    }

    #[test]
    fn update_arithmetic() {
        let mut s = SupervisorState::new(0.05, 0.5, 0.1).unwrap();
        s.update_alpha(1);
        assert!((s.alpha_t + 0.375).abs() < 1e-15);
        assert_eq!(s.alpha_bar, 0.0);
        let mut s = SupervisorState::new(0.05, 0.5, 0.98).unwrap();
        s.update_alpha(0);
        assert!((s.alpha_t - 1.005).abs() < 1e-15);
        assert_eq!(s.alpha_bar, 1.0);
    }

    #[test]
    fn selection_rules() {
        let c = contract();
        let mut s = SupervisorState::new(0.05, 0.5, 0.3).unwrap();
        assert_eq!(s.select_input(&[16.0], &c), Selection::UseDpc(0.3));
        assert_eq!(s.select_input(&[31.0], &c), Selection::UseBackup);
        assert_eq!(s.select_input(&[31.0], &c), Selection::UseBackup);
        assert_eq!(s.backup_run_length, 2);
        let mut z = SupervisorState::new(0.05, 0.5, 0.0).unwrap();
        assert_eq!(z.select_input(&[22.0], &c), Selection::UseBackup);
    }

    #[test]
    fn first_step_uses_backup_with_zero_alpha0() {
        let mut s = SupervisorState::new(0.05, 0.5, 0.0).unwrap();
        let band = Band::uniform(1, 21.0, 25.0);
        let out = s
            .step(0, &[22.0], &[0.0, 0.0], &band, &contract(), |_| unreachable!(), || vec![3.0])
            .unwrap();
        assert_eq!(out.record.policy, PolicyKind::Backup);
        assert_eq!(out.u, vec![3.0]);
        assert_eq!(s.step_count, 0);
        // next step updates α and can hand over to the DPC
        let out = s
            .step(1, &[22.0], &[0.0, 0.0], &band, &contract(), |_| Err(RbdpcError::Infeasible), || vec![4.0])
            .unwrap();
        assert!((s.alpha_t - 0.025).abs() < 1e-15);
        assert_eq!(out.record.policy, PolicyKind::Backup);
        assert!(out.incident.is_some());
    }

    #[test]
    fn contract_validation() {
        let c = contract();
        c.validate(0.05, &Band::uniform(1, 18.0, f64::INFINITY)).unwrap();
        assert!(c.validate(0.01, &Band::uniform(1, 18.0, 25.0)).is_err());
        assert!(c.validate(0.05, &Band::uniform(1, 14.0, 25.0)).is_err());
    }

    #[test]
    fn log_round_trip() {
        let recs = vec![
            StepRecord {
                t: 0,
                y: vec![21.123456789012345],
                u: vec![0.0],
                w: vec![-3.5, 0.1],
                v: 0,
                alpha: 0.0,
                alpha_bar: 0.0,
                policy: PolicyKind::Backup,
                objective: None,
                slack_norm: None,
            },
            StepRecord {
                t: 1,
                y: vec![20.9],
                u: vec![1.0 / 3.0],
                w: vec![-3.4, 0.0],
                v: 1,
                alpha: -0.475,
                alpha_bar: 0.0,
                policy: PolicyKind::Dpc,
                objective: Some(12.5),
                slack_norm: Some(0.01),
            },
        ];
        let mut buf = Vec::new();
        write_step_log(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,y0,u0,w0,w1,v,alpha,alpha_bar,policy,objective,slack_norm\n"));
        assert_eq!(read_step_log(buf.as_slice()).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn recursion_identity_and_extrema(
            vs in proptest::collection::vec(0u8..=1, 1..400),
            alpha in 0.01f64..1.0,
            eta in 0.01f64..2.0,
            a0 in 0.0f64..1.5,
        ) {
            let mut s = SupervisorState::new(alpha, eta, a0).unwrap();
            for v in vs {
                s.update_alpha(v);
                prop_assert!(s.recursion_defect().abs() < 1e-12 * (1.0 + s.step_count as f64));
                prop_assert!(s.alpha_min_seen <= s.alpha_t && s.alpha_t <= s.alpha_max_seen);
                prop_assert_eq!(s.alpha_bar, s.alpha_t.clamp(0.0, 1.0));
                let t = s.step_count as f64;
                let avg = s.violation_count as f64 / t;
                prop_assert!(avg >= alpha + (a0 - s.alpha_max_seen) / (t * eta) - 1e-12);
                prop_assert!(avg <= alpha + (a0 - s.alpha_min_seen) / (t * eta) + 1e-12);
            }
        }
    }
}
