//! Simulated building: a lumped RC thermal model, comfort schedule, weather and
//! the rule-based backup controller.

pub mod schedule;
pub mod weather;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use schedule::{Band, ComfortRule, ComfortSchedule};
pub use weather::{ColdSnap, SyntheticWeather, WeatherConfig, WeatherMode, WeatherSource};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("no comfort band defined at step {step} (minute of week {minute_of_week})")]
    ScheduleGap { step: i64, minute_of_week: u32 },
    #[error("weather trace exhausted: need step {step}, have {len}")]
    CsvExhausted { step: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("plant state became non-finite")]
    NonFiniteState,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Physical two-node parameters: air node and thermal-mass (floor) node.
///
/// Units: capacities in kWh/K, conductances in kW/K, solar apertures in m²,
/// heater power in kW, time in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RcParams {
    pub c_air: f64,
    pub c_mass: f64,
    pub k_air_mass: f64,
    pub k_air_out: f64,
    pub k_mass_out: f64,
    pub solar_air_m2: f64,
    pub solar_mass_m2: f64,
    /// Share of heater power delivered to the mass node.
    pub heater_to_mass: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub meas_noise_std: f64,
    pub process_noise_std: f64,
    pub x0: Vec<f64>,
    /// Optional soft actuator saturation level `s`: `u ↦ s·tanh(u/s)`.
    pub actuator_saturation: Option<f64>,
}

impl Default for RcParams {
    fn default() -> Self {
        Self {
            c_air: 0.4,
            c_mass: 1.0,
            k_air_mass: 1.5,
            k_air_out: 0.12,
            k_mass_out: 0.05,
            solar_air_m2: 4.0,
            solar_mass_m2: 2.0,
            heater_to_mass: 0.8,
            u_min: 0.0,
            u_max: 6.0,
            meas_noise_std: 0.1,
            process_noise_std: 0.02,
            x0: vec![21.0, 21.5],
            actuator_saturation: None,
        }
    }
}

/// Discrete-time linear plant `x⁺ = A x + B_u u + B_w w`, `y = C x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct RcModel {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub meas_noise_std: f64,
    pub process_noise_std: f64,
    pub actuator_saturation: Option<f64>,
    pub dt_minutes: u32,
}

impl RcModel {
    /// Zero-order-hold discretisation of the two-node model.
    pub fn from_params(p: &RcParams, dt_minutes: u32) -> Result<Self, PlantError> {
        let positive = [p.c_air, p.c_mass, p.k_air_mass, p.k_air_out, p.k_mass_out];
        if positive.iter().any(|v| !(*v > 0.0)) || dt_minutes == 0 {
            return Err(PlantError::Config("RC capacities, conductances and dt must be positive".into()));
        }
        if p.x0.len() != 2 || !(p.u_min <= p.u_max) || !(0.0..=1.0).contains(&p.heater_to_mass) {
            return Err(PlantError::Config("invalid RC initial state, input bounds or heater split".into()));
        }
        let (ca, cm) = (p.c_air, p.c_mass);
        let ac = DMatrix::from_row_slice(
            2,
            2,
            &[
                -(p.k_air_mass + p.k_air_out) / ca,
                p.k_air_mass / ca,
                p.k_air_mass / cm,
                -(p.k_air_mass + p.k_mass_out) / cm,
            ],
        );
        // columns: u, T_out, solar
        let bc = DMatrix::from_row_slice(
            2,
            3,
            &[
                (1.0 - p.heater_to_mass) / ca,
                p.k_air_out / ca,
                p.solar_air_m2 / ca,
                p.heater_to_mass / cm,
                p.k_mass_out / cm,
                p.solar_mass_m2 / cm,
            ],
        );
        let (a, b) = zoh(&ac, &bc, dt_minutes as f64 / 60.0);
        Ok(Self {
            a,
            b_u: b.columns(0, 1).into_owned(),
            b_w: b.columns(1, 2).into_owned(),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            x0: DVector::from_vec(p.x0.clone()),
            u_min: vec![p.u_min],
            u_max: vec![p.u_max],
            meas_noise_std: p.meas_noise_std,
            process_noise_std: p.process_noise_std,
            actuator_saturation: p.actuator_saturation,
            dt_minutes,
        })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b_w.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// Steady-state input that holds output 0 at `y` for constant weather `w`
    /// (single-input models only).
    pub fn steady_input(&self, y: f64, w: &[f64]) -> f64 {
        let n = self.n_x();
        let i_minus_a = DMatrix::identity(n, n) - &self.a;
        let lu = i_minus_a.lu();
        let gu = &self.c * lu.solve(&self.b_u).expect("I - A is invertible for a stable plant");
        let gw = &self.c * lu.solve(&self.b_w).expect("I - A is invertible for a stable plant");
        let yw: f64 = (0..self.n_w()).map(|k| gw[(0, k)] * w[k]).sum();
        (y - yw) / gu[(0, 0)]
    }
}

/// `exp([[Ac, Bc], [0, 0]]·dt) = [[A, B], [0, I]]`.
pub fn zoh(ac: &DMatrix<f64>, bc: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (ac.nrows(), bc.ncols());
    let mut big = DMatrix::zeros(n + m, n + m);
    big.view_mut((0, 0), (n, n)).copy_from(&(ac * dt));
    big.view_mut((0, n), (n, m)).copy_from(&(bc * dt));
    let e = big.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// One noisy plant step: returns `(x⁺, y⁺)` where `y⁺` is measured after applying `u`.
pub fn simulate_step<R: Rng>(
    model: &RcModel,
    x: &DVector<f64>,
    u: &[f64],
    w: &[f64],
    rng: &mut R,
) -> Result<(DVector<f64>, Vec<f64>), PlantError> {
    if u.len() != model.n_u() || w.len() != model.n_w() || x.len() != model.n_x() {
        return Err(PlantError::DimensionMismatch(format!(
            "u {} / w {} / x {} vs model {}/{}/{}",
            u.len(),
            w.len(),
            x.len(),
            model.n_u(),
            model.n_w(),
            model.n_x()
        )));
    }
    let u_eff: Vec<f64> = match model.actuator_saturation {
        Some(s) if s > 0.0 => u.iter().map(|v| s * (v / s).tanh()).collect(),
        _ => u.to_vec(),
    };
    let mut x_next = &model.a * x + &model.b_u * DVector::from_column_slice(&u_eff) + &model.b_w * DVector::from_column_slice(w);
    if model.process_noise_std > 0.0 {
        for v in x_next.iter_mut() {
            *v += model.process_noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    if !x_next.iter().all(|v| v.is_finite()) {
        return Err(PlantError::NonFiniteState);
    }
    let mut y = (&model.c * &x_next).as_slice().to_vec();
    if model.meas_noise_std > 0.0 {
        for v in y.iter_mut() {
            *v += model.meas_noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((x_next, y))
}

/// Stateful plant with its own noise stream.
#[derive(Debug, Clone)]
pub struct Plant {
    pub model: RcModel,
    x: DVector<f64>,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(model: RcModel, seed: u64) -> Self {
        Self {
            x: model.x0.clone(),
            model,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x504C_414E_5400),
        }
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn set_state(&mut self, x: DVector<f64>) -> Result<(), PlantError> {
        if x.len() != self.model.n_x() {
            return Err(PlantError::DimensionMismatch(format!("state has {} entries, model {}", x.len(), self.model.n_x())));
        }
        self.x = x;
        Ok(())
    }

    /// Noise-free measurement of the current state.
    pub fn output(&self) -> Vec<f64> {
        (&self.model.c * &self.x).as_slice().to_vec()
    }

    pub fn step(&mut self, u: &[f64], w: &[f64]) -> Result<Vec<f64>, PlantError> {
        let (x, y) = simulate_step(&self.model, &self.x, u, w, &mut self.rng)?;
        self.x = x;
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupMode {
    Heat,
    Cool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackupParams {
    pub setpoint: f64,
    pub deadband: f64,
    pub mode: BackupMode,
}

impl Default for BackupParams {
    fn default() -> Self {
        Self {
            setpoint: 23.0,
            deadband: 1.0,
            mode: BackupMode::Heat,
        }
    }
}

/// Bang-bang thermostat with hysteresis.
///
/// Heating: full power once `y < setpoint − deadband`, off once `y ≥ setpoint`,
/// otherwise the previous decision is kept. With as many inputs as outputs,
/// output `j` drives input `j`; otherwise the coldest (hottest) output drives all.
#[derive(Debug, Clone, PartialEq)]
pub struct BackupController {
    pub params: BackupParams,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    on: Vec<bool>,
}

impl BackupController {
    pub fn new(params: BackupParams, u_min: Vec<f64>, u_max: Vec<f64>) -> Self {
        let n = u_max.len();
        Self {
            params,
            u_min,
            u_max,
            on: vec![false; n],
        }
    }

    pub fn is_on(&self) -> &[bool] {
        &self.on
    }

    fn drive(&self, y: &[f64], j: usize) -> f64 {
        if y.len() == self.on.len() {
            y[j]
        } else {
            match self.params.mode {
                BackupMode::Heat => y.iter().copied().fold(f64::INFINITY, f64::min),
                BackupMode::Cool => y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        }
    }

    pub fn backup_policy(&mut self, y: &[f64]) -> Vec<f64> {
        let (sp, db) = (self.params.setpoint, self.params.deadband);
        (0..self.on.len())
            .map(|j| {
                let v = self.drive(y, j);
                let on = &mut self.on[j];
                match self.params.mode {
                    BackupMode::Heat => {
                        if v < sp - db {
                            *on = true;
                        } else if v >= sp {
                            *on = false;
                        }
                    }
                    BackupMode::Cool => {
                        if v > sp + db {
                            *on = true;
                        } else if v <= sp {
                            *on = false;
                        }
                    }
                }
                if *on {
                    self.u_max[j]
                } else {
                    self.u_min[j]
                }
            })
            .collect()
    }
}
