//! Offline data collection and the online supervised loop.
//!
//! Time is absolute from the first collection step: records `0..T` feed the
//! Hankel matrices, records `T..T+T_c+1` the conformal calibration, and the
//! online loop starts right after. Online step `t` lives at absolute step
//! `collection_len + t`. A record at step `k` holds `(u_k, w_k, y_{k+1})`.

use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::kpi::{compute_kpis, KpiReport};
use super::HarnessError;
use crate::conformal::{self, QuantileTable};
use crate::plant::{BackupController, Band, ComfortSchedule, Plant, RcModel, WeatherSource};
use crate::predictor::{assemble, AffinePredictor, QgWeight};
use crate::rbdpc::{self, Diagnostic, InputSet, OcpSetup};
use crate::supervisor::{violation_indicator, PolicyKind, StepOutcome, StepRecord, SupervisorState};
use crate::trajdata::{build_mosaic, is_persistently_exciting, Dims, HankelBundle, PeReport, Signal, TrajectoryStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Supervised DPC with adaptive tightening.
    Dad,
    /// Backup controller only (baseline).
    BackupOnly,
}

/// Parameters needed to re-check certificates from a log alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub alpha: f64,
    pub eta: f64,
    pub alpha_0: f64,
    pub delta_bar: Option<usize>,
    pub epsilon: Option<f64>,
    pub dt_minutes: u32,
    pub seed: u64,
    /// Absolute step of online `t = 0`.
    pub t_offset: usize,
}

pub struct OfflineData {
    pub hankel_store: TrajectoryStore,
    pub calib_store: TrajectoryStore,
    pub bundle: HankelBundle,
    pub predictor: AffinePredictor,
    pub table: QuantileTable,
    pub pe: PeReport,
    pub plant: Plant,
    pub backup: BackupController,
    pub weather: WeatherSource,
    pub schedule: ComfortSchedule,
    /// Latest measurement, taken at absolute step `collection_len`.
    pub y_now: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    /// Comfort band in force for each record.
    pub bands: Vec<Band>,
    pub diagnostics: Vec<Diagnostic>,
    pub incidents: Vec<(i64, String)>,
    pub kpi: KpiReport,
    pub meta: RunMeta,
    pub pe: Option<PeReport>,
    pub n_cal: Option<usize>,
    /// Paired `(robust, nominal)` solve times when requested.
    pub paired_times: Vec<(f64, f64)>,
}

fn dims() -> Dims {
    Dims::new(1, 1, 2)
}

/// Fresh plant, backup controller, weather trace and schedule for a scenario.
pub fn initial_plant(cfg: &ScenarioConfig) -> Result<(Plant, BackupController, WeatherSource, ComfortSchedule), HarnessError> {
    let model = RcModel::from_params(&cfg.plant, cfg.run.dt_minutes)?;
    let backup = BackupController::new(cfg.backup.params.clone(), model.u_min.clone(), model.u_max.clone());
    let plant = Plant::new(model, cfg.run.seed);
    let weather = WeatherSource::from_config(&cfg.weather, cfg.weather_len(), cfg.run.dt_minutes, cfg.run.seed)?;
    let schedule = cfg.schedule()?;
    Ok((plant, backup, weather, schedule))
}

/// Runs the backup for `T + T_c + 1` steps and builds predictor and residual table.
pub fn collect_offline(cfg: &ScenarioConfig) -> Result<OfflineData, HarnessError> {
    let (mut plant, mut backup, weather, schedule) = initial_plant(cfg)?;
    let c = &cfg.controller;
    let mut hankel_store = TrajectoryStore::new(dims());
    let mut calib_store = TrajectoryStore::new(dims());
    let mut y = plant.output();
    for k in 0..cfg.collection_len() {
        let u = backup.backup_policy(&y);
        let w = weather.realized(k)?;
        let y_next = plant.step(&u, &w).map_err(|e| HarnessError::at(k as i64)(e.into()))?;
        let store = if k < c.hankel_len { &mut hankel_store } else { &mut calib_store };
        store.push(k as i64, 0, u, y_next.clone(), w)?;
        y = y_next;
    }
    let u_seq: Vec<&[f64]> = hankel_store.signal(0..hankel_store.len(), Signal::U);
    let pe = is_persistently_exciting(&u_seq, c.t_init + c.horizon)?;
    if !pe.exciting {
        warn!(
            "collected input is not persistently exciting of order {} (rank {}/{})",
            c.t_init + c.horizon,
            pe.rank,
            pe.rows
        );
    }
    let bundle = build_mosaic(&hankel_store, c.t_init, c.horizon)?;
    let predictor = assemble(&bundle, &QgWeight::Scalar(c.q_g), c.t_init, c.horizon)?;
    let table = conformal::calibrate(&calib_store, &predictor, c.t_init, c.horizon, c.window_cap)?;
    info!("offline phase: {} Hankel columns, {} calibration anchors", bundle.column_count(), table.n_cal);
    Ok(OfflineData {
        hankel_store,
        calib_store,
        bundle,
        predictor,
        table,
        pe,
        plant,
        backup,
        weather,
        schedule,
        y_now: y,
    })
}

fn meta(cfg: &ScenarioConfig) -> RunMeta {
    let contract = cfg.contract();
    RunMeta {
        alpha: cfg.controller.alpha,
        eta: cfg.controller.eta,
        alpha_0: cfg.controller.alpha_0,
        delta_bar: Some(contract.delta_bar),
        epsilon: Some(contract.epsilon),
        dt_minutes: cfg.run.dt_minutes,
        seed: cfg.run.seed,
        t_offset: cfg.collection_len(),
    }
}

/// One closed-loop run in the given mode, without the paired baseline.
pub fn simulate(cfg: &ScenarioConfig, mode: Mode, pair_nominal: bool) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let c = &cfg.controller;
    let mut off = collect_offline(cfg)?;
    let contract = cfg.contract();
    contract.validate(c.alpha, &off.schedule.envelope())?;
    let mut sup = SupervisorState::new(c.alpha, c.eta, c.alpha_0)?;
    let cost = c.cost();
    let qp = c.qp_settings();
    let inputs = InputSet {
        u_min: off.plant.model.u_min.clone(),
        u_max: off.plant.model.u_max.clone(),
    };
    let depth = c.t_init + c.horizon;
    let mut window = TrajectoryStore::with_capacity_limit(dims(), c.hankel_len);
    for r in off.hankel_store.iter().chain(off.calib_store.iter()) {
        window.push(r.step, r.seg, r.u.clone(), r.y.clone(), r.w.clone())?;
    }
    let offset = cfg.collection_len();
    let n = cfg.run.horizon_steps;
    let mut out = RunOutput {
        records: Vec::with_capacity(n + 1),
        bands: Vec::with_capacity(n + 1),
        diagnostics: Vec::new(),
        incidents: Vec::new(),
        kpi: KpiReport::default(),
        meta: meta(cfg),
        pe: Some(off.pe.clone()),
        n_cal: Some(off.table.n_cal),
        paired_times: Vec::new(),
    };
    let mut y = off.y_now.clone();
    for t in 0..=n {
        let abs = offset + t;
        if mode == Mode::Dad && c.rebuild_period > 0 && t > 0 && t % c.rebuild_period == 0 {
            match build_mosaic(&window, c.t_init, c.horizon)
                .map_err(HarnessError::from)
                .and_then(|b| assemble(&b, &QgWeight::Scalar(c.q_g), c.t_init, c.horizon).map_err(HarnessError::from))
            {
                Ok(p) => off.predictor = p,
                Err(e) => warn!("predictor rebuild at t={t} failed, keeping previous: {e}"),
            }
        }
        let band = off.schedule.comfort_at(abs as i64).map_err(|e| HarnessError::at(t as i64)(e.into()))?.clone();
        let (w_now, w_fc) = off
            .weather
            .weather_horizon(abs, c.horizon)
            .map_err(|e| HarnessError::at(t as i64)(e.into()))?;
        let step = match mode {
            Mode::BackupOnly => {
                // α is tracked for the log only; the backup is always applied
                let v = violation_indicator(&y, &band).map_err(|e| HarnessError::at(t as i64)(e.into()))?;
                if t > 0 {
                    sup.update_alpha(v);
                }
                let u = off.backup.backup_policy(&y);
                StepOutcome {
                    u: u.clone(),
                    record: StepRecord {
                        t: t as i64,
                        y: y.clone(),
                        u,
                        w: w_now.clone(),
                        v,
                        alpha: sup.alpha_t,
                        alpha_bar: sup.alpha_bar,
                        policy: PolicyKind::Backup,
                        objective: None,
                        slack_norm: None,
                    },
                    ocp: None,
                    incident: None,
                }
            }
            Mode::Dad => {
                let z = window.z_vector(window.len() - c.t_init..window.len());
                let w_pred = DVector::from_iterator(w_fc.len() * 2, w_fc.iter().flatten().copied());
                let setup = OcpSetup {
                    predictor: &off.predictor,
                    table: &off.table,
                    schedule: &off.schedule,
                    cost: &cost,
                    inputs: &inputs,
                };
                let paired = &mut out.paired_times;
                let backup = &mut off.backup;
                let y_ref = &y;
                sup.step(
                    t as i64,
                    &y,
                    &w_now,
                    &band,
                    &contract,
                    |level| {
                        if pair_nominal {
                            // alternate the order so neither solve benefits from warm caches
                            let nominal = |_: ()| {
                                let s = Instant::now();
                                rbdpc::policy(&setup, 1.0, abs as i64, &z, &w_pred, &qp).map(|_| s.elapsed().as_secs_f64())
                            };
                            if t % 2 == 0 {
                                let tn = nominal(())?;
                                let r = rbdpc::policy(&setup, level, abs as i64, &z, &w_pred, &qp)?;
                                paired.push((r.solve_time, tn));
                                Ok(r)
                            } else {
                                let r = rbdpc::policy(&setup, level, abs as i64, &z, &w_pred, &qp)?;
                                let tn = nominal(())?;
                                paired.push((r.solve_time, tn));
                                Ok(r)
                            }
                        } else {
                            rbdpc::policy(&setup, level, abs as i64, &z, &w_pred, &qp)
                        }
                    },
                    || backup.backup_policy(y_ref),
                )
                .map_err(|e| HarnessError::at(t as i64)(e.into()))?
            }
        };
        if let Some(ocp) = &step.ocp {
            out.diagnostics.push(ocp.diagnostic(t as i64, sup.alpha_bar));
        }
        if let Some(msg) = step.incident {
            out.incidents.push((t as i64, msg));
        }
        let y_next = off.plant.step(&step.u, &w_now).map_err(|e| HarnessError::at(t as i64)(e.into()))?;
        window
            .push(abs as i64, 0, step.u.clone(), y_next.clone(), w_now.clone())
            .map_err(|e| HarnessError::at(t as i64)(e.into()))?;
        if mode == Mode::Dad && c.online_residuals && window.len() >= depth {
            let r = conformal::window_residuals(&window, &off.predictor, window.len() - depth)
                .map_err(|e| HarnessError::at(t as i64)(e.into()))?;
            for i in 0..c.horizon {
                off.table.push_residual(i, 0, r[i]).map_err(|e| HarnessError::at(t as i64)(e.into()))?;
            }
        }
        out.records.push(step.record);
        out.bands.push(band);
        y = y_next;
    }
    out.kpi = compute_kpis(&out.records, &out.bands, cfg.run.dt_minutes, &out.diagnostics);
    Ok(out)
}

/// Supervised run plus, when configured, the backup-only baseline under the
/// same seed for the relative-energy KPI.
pub fn run_closed_loop(cfg: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    let mut out = simulate(cfg, Mode::Dad, false)?;
    if cfg.run.baseline {
        let base = simulate(cfg, Mode::BackupOnly, false)?;
        out.kpi.set_baseline(base.kpi.energy_kwh);
    }
    Ok(out)
}
