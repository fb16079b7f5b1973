//! Replays a step log and checks the violation-rate certificates.

use serde::{Deserialize, Serialize};

use super::closed_loop::RunMeta;
use super::HarnessError;
use crate::supervisor::{PolicyKind, StepRecord};

/// Absolute tolerance per step of accumulated rounding.
const ROUNDING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateCheck {
    pub name: String,
    pub status: CheckStatus,
    pub first_violation: Option<i64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub checks: Vec<CertificateCheck>,
    pub backup_intervals: Vec<(i64, usize)>,
    pub max_backup_interval: usize,
    pub min_alpha: f64,
}

impl CertificateReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&CertificateCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, first: Option<i64>, detail: String) -> CertificateCheck {
    CertificateCheck {
        name: name.into(),
        status: if first.is_some() { CheckStatus::Fail } else { CheckStatus::Pass },
        first_violation: first,
        detail,
    }
}

fn not_applicable(name: &str, detail: &str) -> CertificateCheck {
    CertificateCheck {
        name: name.into(),
        status: CheckStatus::NotApplicable,
        first_violation: None,
        detail: detail.into(),
    }
}

/// Maximal runs of consecutive backup steps as `(start t, length)`.
pub fn backup_intervals(records: &[StepRecord]) -> Vec<(i64, usize)> {
    let mut out: Vec<(i64, usize)> = Vec::new();
    let mut open = false;
    for r in records {
        if r.policy == PolicyKind::Backup {
            match (open, out.last_mut()) {
                (true, Some(last)) => last.1 += 1,
                _ => out.push((r.t, 1)),
            }
            open = true;
        } else {
            open = false;
        }
    }
    out
}

/// Checks, in order: the α recursion identity, the two-sided average
/// violation bound, the strict bound when `min α_t ≥ α_0`, the lower bound
/// `α_t ≥ −η(1−α)(Δ̄+1)` when a backup contract with `ε > 0` is declared,
/// and that every backup interval is shorter than `2Δ̄`.
pub fn verify_certificates(records: &[StepRecord], meta: &RunMeta) -> Result<CertificateReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::MalformedLog("empty log".into()));
    }
    for (k, r) in records.iter().enumerate() {
        if r.t != k as i64 {
            return Err(HarnessError::MalformedLog(format!("row {k} has t={}, expected {k}", r.t)));
        }
        if r.v > 1 || !r.alpha.is_finite() {
            return Err(HarnessError::MalformedLog(format!("row {k} has invalid v or alpha")));
        }
    }
    let (alpha, eta, a0) = (meta.alpha, meta.eta, meta.alpha_0);
    let mut checks = Vec::new();

    // recursion identity and truncation
    let mut first = None;
    let mut worst = 0.0f64;
    let mut sum_v = 0u64;
    for r in records {
        if r.t >= 1 {
            sum_v += r.v as u64;
        }
        let t = r.t as f64;
        let expect = a0 + eta * (t * alpha - sum_v as f64);
        let defect = (r.alpha - expect).abs();
        worst = worst.max(defect);
        if first.is_none() && (defect > ROUNDING * (1.0 + t) || r.alpha_bar != r.alpha.clamp(0.0, 1.0)) {
            first = Some(r.t);
        }
    }
    checks.push(check("recursion", first, format!("max |defect| {worst:.3e}")));

    // two-sided average-violation bound with running extrema of α
    let mut first = None;
    let (mut amin, mut amax) = (a0, a0);
    let mut sum_v = 0u64;
    let mut strict_first = None;
    for r in records.iter().skip(1) {
        sum_v += r.v as u64;
        amin = amin.min(r.alpha);
        amax = amax.max(r.alpha);
        let t = r.t as f64;
        let avg = sum_v as f64 / t;
        let lo = alpha + (a0 - amax) / (t * eta);
        let hi = alpha + (a0 - amin) / (t * eta);
        let tol = ROUNDING * (1.0 + t);
        if first.is_none() && !(avg >= lo - tol && avg <= hi + tol) {
            first = Some(r.t);
        }
        if strict_first.is_none() && avg > alpha + tol {
            strict_first = Some(r.t);
        }
    }
    let min_alpha = records.iter().map(|r| r.alpha).fold(a0, f64::min);
    checks.push(check("average_identity", first, format!("α range [{amin:.4}, {amax:.4}]")));
    if min_alpha >= a0 {
        checks.push(check("alpha_floor", strict_first, format!("min α_t = {min_alpha:.4} ≥ α_0")));
    } else {
        checks.push(not_applicable("alpha_floor", "min α_t < α_0"));
    }

    let intervals = backup_intervals(records);
    let max_interval = intervals.iter().map(|i| i.1).max().unwrap_or(0);
    match (meta.delta_bar, meta.epsilon) {
        (Some(db), Some(eps)) if eps > 0.0 => {
            let bound = -eta * (1.0 - alpha) * (db as f64 + 1.0);
            let first = records.iter().find(|r| r.alpha < bound).map(|r| r.t);
            checks.push(check("recovery_bound", first, format!("bound {bound:.4}, min α_t {min_alpha:.4}")));
            let first = intervals.iter().find(|i| i.1 >= 2 * db).map(|i| i.0);
            checks.push(check(
                "backup_intervals",
                first,
                format!("{} intervals, longest {max_interval} (< {})", intervals.len(), 2 * db),
            ));
        }
        _ => {
            checks.push(not_applicable("recovery_bound", "no backup contract with ε > 0"));
            checks.push(not_applicable("backup_intervals", "no backup contract with ε > 0"));
        }
    }
    Ok(CertificateReport {
        checks,
        backup_intervals: intervals,
        max_backup_interval: max_interval,
        min_alpha,
    })
}
