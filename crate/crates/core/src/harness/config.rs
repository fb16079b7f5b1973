//! TOML scenario configuration.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::plant::{Band, BackupParams, ComfortRule, ComfortSchedule, RcParams, WeatherConfig};
use crate::qpsolve::QpSettings;
use crate::rbdpc::CostSpec;
use crate::supervisor::BackupContract;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    Heating,
    Office,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub preset: SchedulePreset,
    pub rules: Vec<ComfortRule>,
    pub default_band: Option<Band>,
    pub start_minute_of_week: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            preset: SchedulePreset::Heating,
            rules: Vec::new(),
            default_band: None,
            start_minute_of_week: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub t_init: usize,
    pub q_g: f64,
    pub q_delta: f64,
    pub linear_u: Vec<f64>,
    pub quad_u: Vec<f64>,
    pub eta: f64,
    pub alpha: f64,
    pub alpha_0: f64,
    /// Hankel data length `T`.
    pub hankel_len: usize,
    /// Calibration data length `T_c`.
    pub calib_len: usize,
    /// Residual window per table cell; defaults to the calibration anchor count.
    pub window_cap: Option<usize>,
    /// Steps between predictor rebuilds from the sliding data window (0 = never).
    pub rebuild_period: usize,
    /// Feed realised online residuals back into the quantile table.
    pub online_residuals: bool,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 96,
            t_init: 12,
            q_g: 0.01,
            q_delta: 10.0,
            linear_u: vec![1.0],
            quad_u: Vec::new(),
            eta: 0.5,
            alpha: 0.05,
            alpha_0: 0.0,
            hankel_len: 672,
            calib_len: 672,
            window_cap: None,
            rebuild_period: 96,
            online_residuals: true,
            qp_tol: 1e-7,
            qp_max_iter: 200,
        }
    }
}

impl ControllerConfig {
    pub fn cost(&self) -> CostSpec {
        CostSpec {
            linear_u: self.linear_u.clone(),
            quad_u: self.quad_u.clone(),
            q_delta: self.q_delta,
        }
    }

    pub fn qp_settings(&self) -> QpSettings {
        QpSettings {
            tol_kkt: self.qp_tol,
            tol_feas: self.qp_tol,
            max_iter: self.qp_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackupConfig {
    #[serde(flatten)]
    pub params: BackupParams,
    pub y_lim_lower: Vec<f64>,
    pub y_lim_upper: Vec<f64>,
    pub delta_bar: usize,
    /// Declared recovery margin `ε`; defaults to `α`.
    pub epsilon: Option<f64>,
}

impl Default for BackupConfig {
    fn default() -> Self {
        Self {
            params: BackupParams::default(),
            y_lim_lower: vec![15.0],
            y_lim_upper: vec![30.0],
            delta_bar: 96,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Supervised steps `t = 1..=horizon_steps` (step 0 is logged as well).
    pub horizon_steps: usize,
    pub seed: u64,
    pub dt_minutes: u32,
    /// Also run the backup alone for the relative-energy KPI.
    pub baseline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 1344,
            seed: 0,
            dt_minutes: 15,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub plant: RcParams,
    pub schedule: ScheduleConfig,
    pub controller: ControllerConfig,
    pub backup: BackupConfig,
    pub weather: WeatherConfig,
    pub run: RunConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let c = &self.controller;
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if !(c.alpha > 0.0 && c.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(c.alpha_0 >= 0.0) || !(c.eta > 0.0) {
            return bad("need alpha_0 >= 0 and eta > 0");
        }
        if c.horizon == 0 || c.t_init == 0 || self.run.horizon_steps == 0 {
            return bad("horizon, t_init and horizon_steps must be positive");
        }
        if c.hankel_len < c.horizon + c.t_init {
            return bad("hankel_len shorter than t_init + horizon");
        }
        if !(c.q_g >= 0.0) {
            return bad("q_g must be nonnegative");
        }
        if let Some(e) = self.backup.epsilon {
            if !(0.0..=c.alpha).contains(&e) {
                return bad("epsilon must lie in [0, alpha]");
            }
        }
        self.schedule()?.validate()?;
        Ok(())
    }

    pub fn n_y(&self) -> usize {
        1
    }

    pub fn schedule(&self) -> Result<ComfortSchedule, HarnessError> {
        let dt = self.run.dt_minutes;
        let n_y = self.n_y();
        let mut s = match self.schedule.preset {
            SchedulePreset::Heating => ComfortSchedule::heating(n_y, dt),
            SchedulePreset::Office => ComfortSchedule::office(n_y, dt),
            SchedulePreset::Custom => ComfortSchedule {
                rules: self.schedule.rules.clone(),
                default_band: self.schedule.default_band.clone(),
                dt_minutes: dt,
                start_minute_of_week: 0,
            },
        };
        s.start_minute_of_week = self.schedule.start_minute_of_week;
        Ok(s)
    }

    pub fn contract(&self) -> BackupContract {
        BackupContract {
            delta_bar: self.backup.delta_bar,
            epsilon: self.backup.epsilon.unwrap_or(self.controller.alpha),
            y_lim_lower: self.backup.y_lim_lower.clone(),
            y_lim_upper: self.backup.y_lim_upper.clone(),
        }
    }

    /// Records collected under the backup before going online: `T` for the
    /// Hankel matrices plus `T_c + 1` for calibration.
    pub fn collection_len(&self) -> usize {
        self.controller.hankel_len + self.controller.calib_len + 1
    }

    /// Weather samples needed for a full run.
    pub fn weather_len(&self) -> usize {
        self.collection_len() + self.run.horizon_steps + self.controller.horizon + 2
    }
}
