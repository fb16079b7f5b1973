//! Weather traces and forecasts.
//!
//! The external input is `w = [outdoor temperature °C, global solar kW/m²]`.

use std::f64::consts::PI;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::schedule::MINUTES_PER_DAY;
use super::PlantError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWeather {
    pub mean_temp_c: f64,
    pub diurnal_amplitude_c: f64,
    /// Minute of the day with the warmest temperature.
    pub peak_minute: u32,
    /// Innovation std of the AR(1) temperature deviation.
    pub noise_std: f64,
    pub noise_ar: f64,
    pub solar_peak_kw_m2: f64,
    pub daylight_start_minute: u32,
    pub daylight_end_minute: u32,
    /// Daily clear-sky fraction is drawn uniformly from `[min_clearness, 1]`.
    pub min_clearness: f64,
}

impl Default for SyntheticWeather {
    fn default() -> Self {
        Self {
            mean_temp_c: 0.0,
            diurnal_amplitude_c: 4.0,
            peak_minute: 15 * 60,
            noise_std: 0.3,
            noise_ar: 0.9,
            solar_peak_kw_m2: 0.35,
            daylight_start_minute: 8 * 60,
            daylight_end_minute: 17 * 60,
            min_clearness: 0.3,
        }
    }
}

/// Temperature drop applied to the realised weather over a window of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdSnap {
    pub start_step: usize,
    pub duration_steps: usize,
    pub depth_c: f64,
    /// Whether forecasts see the drop.
    #[serde(default)]
    pub forecast_sees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeatherMode {
    Synthetic(SyntheticWeather),
    Csv { path: String },
}

impl Default for WeatherMode {
    fn default() -> Self {
        WeatherMode::Synthetic(SyntheticWeather::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherConfig {
    #[serde(flatten)]
    pub mode: WeatherMode,
    pub forecast_noise_std: f64,
    pub cold_snap: Option<ColdSnap>,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        Self {
            mode: WeatherMode::default(),
            forecast_noise_std: 0.3,
            cold_snap: None,
        }
    }
}

/// Realised weather plus the base trace forecasts are built from.
#[derive(Debug, Clone)]
pub struct WeatherSource {
    truth: Vec<[f64; 2]>,
    forecast_base: Vec<[f64; 2]>,
    forecast_noise_std: f64,
    seed: u64,
}

impl WeatherSource {
    /// Synthetic trace of `len` steps; step 0 is at minute 0 of the day.
    pub fn synthetic(params: &SyntheticWeather, len: usize, dt_minutes: u32, forecast_noise_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5745_4154_4845_5200);
        let clear = Uniform::new_inclusive(params.min_clearness.clamp(0.0, 1.0), 1.0).expect("valid range");
        let mut dev = 0.0;
        let mut clearness = 1.0;
        let mut last_day = u64::MAX;
        let trace = (0..len)
            .map(|k| {
                let minute = (k as u64 * dt_minutes as u64) % MINUTES_PER_DAY as u64;
                let day = k as u64 * dt_minutes as u64 / MINUTES_PER_DAY as u64;
                if day != last_day {
                    clearness = rng.sample(clear);
                    last_day = day;
                }
                dev = params.noise_ar * dev + params.noise_std * rng.sample::<f64, _>(StandardNormal);
                let phase = 2.0 * PI * (minute as f64 - params.peak_minute as f64) / MINUTES_PER_DAY as f64;
                let temp = params.mean_temp_c + params.diurnal_amplitude_c * phase.cos() + dev;
                let (a, b) = (params.daylight_start_minute as f64, params.daylight_end_minute as f64);
                let m = minute as f64;
                let solar = if m > a && m < b {
                    clearness * params.solar_peak_kw_m2 * (PI * (m - a) / (b - a)).sin()
                } else {
                    0.0
                };
                [temp, solar]
            })
            .collect::<Vec<_>>();
        Self {
            forecast_base: trace.clone(),
            truth: trace,
            forecast_noise_std,
            seed,
        }
    }

    /// Trace from a `step,temp_c,solar_kw_m2` CSV.
    pub fn from_csv<R: Read>(reader: R, forecast_noise_std: f64, seed: u64) -> Result<Self, PlantError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["step", "temp_c", "solar_kw_m2"] {
            return Err(PlantError::Config(format!("unexpected weather header {header:?}")));
        }
        let mut trace = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let field = |k: usize| -> Result<f64, PlantError> {
                row.get(k)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| PlantError::Config(format!("bad weather value in row {}", trace.len())))
            };
            trace.push([field(1)?, field(2)?]);
        }
        Ok(Self {
            forecast_base: trace.clone(),
            truth: trace,
            forecast_noise_std,
            seed,
        })
    }

    pub fn from_config(cfg: &WeatherConfig, len: usize, dt_minutes: u32, seed: u64) -> Result<Self, PlantError> {
        let mut src = match &cfg.mode {
            WeatherMode::Synthetic(p) => Self::synthetic(p, len, dt_minutes, cfg.forecast_noise_std, seed),
            WeatherMode::Csv { path } => {
                let file = std::fs::File::open(path).map_err(|e| PlantError::Config(format!("{path}: {e}")))?;
                Self::from_csv(file, cfg.forecast_noise_std, seed)?
            }
        };
        if let Some(snap) = &cfg.cold_snap {
            src.apply_cold_snap(snap);
        }
        Ok(src)
    }

    pub fn apply_cold_snap(&mut self, snap: &ColdSnap) {
        let end = (snap.start_step + snap.duration_steps).min(self.truth.len());
        for k in snap.start_step.min(end)..end {
            self.truth[k][0] -= snap.depth_c;
            if snap.forecast_sees {
                self.forecast_base[k][0] -= snap.depth_c;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn realized(&self, t: usize) -> Result<Vec<f64>, PlantError> {
        self.truth
            .get(t)
            .map(|w| w.to_vec())
            .ok_or(PlantError::CsvExhausted { step: t, len: self.truth.len() })
    }

    /// Realised weather at `t` and an `n`-step forecast for steps `t..t+n`.
    ///
    /// Forecast noise for a given `(t, k)` is drawn from a stream seeded by
    /// `(seed, t)` only, so forecasts are reproducible and independent of call order.
    pub fn weather_horizon(&self, t: usize, n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>), PlantError> {
        if t + n > self.truth.len() {
            return Err(PlantError::CsvExhausted {
                step: t + n,
                len: self.truth.len(),
            });
        }
        let now = self.truth[t].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (t as u64).wrapping_add(0xF0CA));
        let forecast = (0..n)
            .map(|k| {
                let base = self.forecast_base[t + k];
                let e: f64 = rng.sample(StandardNormal);
                let temp = if self.forecast_noise_std > 0.0 {
                    base[0] + self.forecast_noise_std * e
                } else {
                    base[0]
                };
                vec![temp, base[1]]
            })
            .collect();
        Ok((now, forecast))
    }
}
