//! Comfort and energy indicators.

use serde::{Deserialize, Serialize};

use crate::plant::Band;
use crate::rbdpc::Diagnostic;
use crate::supervisor::{PolicyKind, StepRecord};

/// Indicators over the supervised steps `t ≥ 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub steps: usize,
    pub violation_ratio: f64,
    /// Kelvin-hours outside the comfort band.
    pub violation_magnitude_kh: f64,
    pub energy_kwh: f64,
    pub relative_energy_pct: Option<f64>,
    pub backup_activation_steps: usize,
    pub mean_solve_time: Option<f64>,
    pub final_alpha: f64,
}

impl KpiReport {
    pub fn set_baseline(&mut self, baseline_energy_kwh: f64) {
        self.relative_energy_pct = (baseline_energy_kwh > 0.0).then(|| 100.0 * self.energy_kwh / baseline_energy_kwh);
    }
}

pub fn compute_kpis(records: &[StepRecord], bands: &[Band], dt_minutes: u32, diags: &[Diagnostic]) -> KpiReport {
    let h = dt_minutes as f64 / 60.0;
    let mut k = KpiReport::default();
    for (r, band) in records.iter().zip(bands).filter(|(r, _)| r.t >= 1) {
        k.steps += 1;
        k.violation_ratio += r.v as f64;
        k.violation_magnitude_kh += band.exceedance(&r.y) * h;
        k.energy_kwh += r.u.iter().sum::<f64>() * h;
        if r.policy == PolicyKind::Backup {
            k.backup_activation_steps += 1;
        }
        k.final_alpha = r.alpha;
    }
    if k.steps > 0 {
        k.violation_ratio /= k.steps as f64;
    }
    if !diags.is_empty() {
        k.mean_solve_time = Some(diags.iter().map(|d| d.solve_time).sum::<f64>() / diags.len() as f64);
    }
    k
}
