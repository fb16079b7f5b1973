//! α-sweeps and Monte Carlo replication, run data-parallel over (α, seed) jobs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::closed_loop::{simulate, Mode, RunOutput};
use super::config::ScenarioConfig;
use super::kpi::KpiReport;
use super::HarnessError;
use crate::par;

/// One supervised run together with its paired baseline energy.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub alpha: f64,
    pub seed: u64,
    pub output: RunOutput,
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Dad(usize, u64),
    Baseline(u64),
}

/// Runs every `(α, seed)` combination plus one baseline per seed. Results are
/// ordered by α, then seed, independent of scheduling.
pub fn run_grid(cfg: &ScenarioConfig, alphas: &[f64], seeds: &[u64]) -> Result<Vec<GridRun>, HarnessError> {
    let mut jobs: Vec<Job> = Vec::new();
    for (ai, _) in alphas.iter().enumerate() {
        jobs.extend(seeds.iter().map(|&s| Job::Dad(ai, s)));
    }
    if cfg.run.baseline {
        jobs.extend(seeds.iter().map(|&s| Job::Baseline(s)));
    }
    let results = par::map(jobs.clone(), |job| {
        let mut c = cfg.clone();
        match job {
            Job::Dad(ai, s) => {
                c.controller.alpha = alphas[ai];
                c.run.seed = s;
                simulate(&c, Mode::Dad, false)
            }
            Job::Baseline(s) => {
                c.run.seed = s;
                simulate(&c, Mode::BackupOnly, false)
            }
        }
    });
    let mut runs = Vec::new();
    let mut baselines = Vec::new();
    for (job, res) in jobs.into_iter().zip(results) {
        let out = res?;
        match job {
            Job::Dad(ai, s) => runs.push(GridRun {
                alpha: alphas[ai],
                seed: s,
                output: out,
            }),
            Job::Baseline(s) => baselines.push((s, out.kpi.energy_kwh)),
        }
    }
    for run in &mut runs {
        if let Some((_, e)) = baselines.iter().find(|(s, _)| *s == run.seed) {
            run.output.kpi.set_baseline(*e);
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

/// Mean and sample std of the KPIs over seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub n_seeds: usize,
    pub violation_ratio: Stat,
    pub violation_magnitude_kh: Stat,
    pub energy_kwh: Stat,
    pub relative_energy_pct: Option<Stat>,
    pub backup_activation_steps: Stat,
    pub per_seed: Vec<KpiReport>,
}

impl MonteCarloReport {
    pub fn from_kpis(kpis: Vec<KpiReport>) -> Self {
        let col = |f: &dyn Fn(&KpiReport) -> f64| kpis.iter().map(f).collect::<Vec<_>>();
        let rel: Option<Vec<f64>> = kpis.iter().map(|k| k.relative_energy_pct).collect();
        Self {
            n_seeds: kpis.len(),
            violation_ratio: Stat::of(&col(&|k| k.violation_ratio)),
            violation_magnitude_kh: Stat::of(&col(&|k| k.violation_magnitude_kh)),
            energy_kwh: Stat::of(&col(&|k| k.energy_kwh)),
            relative_energy_pct: rel.filter(|r| !r.is_empty()).map(|r| Stat::of(&r)),
            backup_activation_steps: Stat::of(&col(&|k| k.backup_activation_steps as f64)),
            per_seed: kpis,
        }
    }
}

/// Seeds `cfg.run.seed, cfg.run.seed + 1, …`.
pub fn seed_list(cfg: &ScenarioConfig, n_seeds: usize) -> Vec<u64> {
    (0..n_seeds as u64).map(|k| cfg.run.seed + k).collect()
}

pub fn monte_carlo(cfg: &ScenarioConfig, n_seeds: usize) -> Result<MonteCarloReport, HarnessError> {
    let runs = run_grid(cfg, &[cfg.controller.alpha], &seed_list(cfg, n_seeds))?;
    Ok(MonteCarloReport::from_kpis(runs.into_iter().map(|r| r.output.kpi).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub n_seeds: usize,
    pub energy_kwh: f64,
    pub relative_energy_pct: Option<f64>,
    pub violation_ratio: f64,
    pub violation_magnitude_kh: f64,
    pub backup_activation_steps: f64,
}

/// Seed-averaged trade-off table from grid runs.
pub fn summarize(runs: &[GridRun], alphas: &[f64]) -> Vec<SweepRow> {
    alphas
        .iter()
        .map(|&a| {
            let kpis: Vec<KpiReport> = runs.iter().filter(|r| r.alpha == a).map(|r| r.output.kpi.clone()).collect();
            let mc = MonteCarloReport::from_kpis(kpis);
            SweepRow {
                alpha: a,
                n_seeds: mc.n_seeds,
                energy_kwh: mc.energy_kwh.mean,
                relative_energy_pct: mc.relative_energy_pct.map(|s| s.mean),
                violation_ratio: mc.violation_ratio.mean,
                violation_magnitude_kh: mc.violation_magnitude_kh.mean,
                backup_activation_steps: mc.backup_activation_steps.mean,
            }
        })
        .collect()
}

pub fn sweep_alpha(cfg: &ScenarioConfig, alphas: &[f64], n_seeds: usize) -> Result<Vec<SweepRow>, HarnessError> {
    let runs = run_grid(cfg, alphas, &seed_list(cfg, n_seeds))?;
    Ok(summarize(&runs, alphas))
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "alpha",
        "n_seeds",
        "energy_kwh",
        "relative_energy_pct",
        "violation_ratio",
        "violation_magnitude_kh",
        "backup_activation_steps",
    ])?;
    for r in rows {
        wtr.write_record([
            r.alpha.to_string(),
            r.n_seeds.to_string(),
            r.energy_kwh.to_string(),
            r.relative_energy_pct.map(|v| v.to_string()).unwrap_or_default(),
            r.violation_ratio.to_string(),
            r.violation_magnitude_kh.to_string(),
            r.backup_activation_steps.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
