//! Occupancy-driven comfort bands.

use serde::{Deserialize, Serialize};

use super::PlantError;

pub const MINUTES_PER_DAY: u32 = 1440;
pub const MINUTES_PER_WEEK: u32 = 7 * MINUTES_PER_DAY;

/// Per-output comfort box. Upper bounds may be `+∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl Band {
    pub fn new(lb: Vec<f64>, ub: Vec<f64>) -> Self {
        Self { lb, ub }
    }

    pub fn uniform(n_y: usize, lb: f64, ub: f64) -> Self {
        Self {
            lb: vec![lb; n_y],
            ub: vec![ub; n_y],
        }
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Sum over outputs of the distance to the band.
    pub fn exceedance(&self, y: &[f64]) -> f64 {
        y.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(v, (lo, hi))| (lo - v).max(v - hi).max(0.0))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortRule {
    /// Bit `d` set means the rule applies on day `d` (0 = Monday).
    pub day_mask: u8,
    pub start_minute: u32,
    pub end_minute: u32,
    pub band: Band,
}

impl ComfortRule {
    fn matches(&self, minute_of_week: u32) -> bool {
        let day = minute_of_week / MINUTES_PER_DAY;
        let minute = minute_of_week % MINUTES_PER_DAY;
        self.day_mask & (1 << day) != 0 && minute >= self.start_minute && minute < self.end_minute
    }
}

pub const WEEKDAYS: u8 = 0b001_1111;
pub const ALL_DAYS: u8 = 0b111_1111;

/// Weekly schedule of comfort bands; the first matching rule wins, otherwise
/// the default band applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortSchedule {
    pub rules: Vec<ComfortRule>,
    pub default_band: Option<Band>,
    pub dt_minutes: u32,
    /// Minute of the week at step 0 (0 = Monday 00:00).
    #[serde(default)]
    pub start_minute_of_week: u32,
}

impl ComfortSchedule {
    /// Office-style band: `[21, 25]` on weekdays 08:00–18:00, `[19, 27]` otherwise.
    pub fn office(n_y: usize, dt_minutes: u32) -> Self {
        Self {
            rules: vec![ComfortRule {
                day_mask: WEEKDAYS,
                start_minute: 8 * 60,
                end_minute: 18 * 60,
                band: Band::uniform(n_y, 21.0, 25.0),
            }],
            default_band: Some(Band::uniform(n_y, 19.0, 27.0)),
            dt_minutes,
            start_minute_of_week: 0,
        }
    }

    /// Heating-only band: `y ≥ 21` on weekdays 08:00–18:00, `y ≥ 18` otherwise.
    pub fn heating(n_y: usize, dt_minutes: u32) -> Self {
        Self {
            rules: vec![ComfortRule {
                day_mask: WEEKDAYS,
                start_minute: 8 * 60,
                end_minute: 18 * 60,
                band: Band::uniform(n_y, 21.0, f64::INFINITY),
            }],
            default_band: Some(Band::uniform(n_y, 18.0, f64::INFINITY)),
            dt_minutes,
            start_minute_of_week: 0,
        }
    }

    pub fn minute_of_week(&self, t: i64) -> u32 {
        let m = self.start_minute_of_week as i64 + t * self.dt_minutes as i64;
        m.rem_euclid(MINUTES_PER_WEEK as i64) as u32
    }

    pub fn comfort_at(&self, t: i64) -> Result<&Band, PlantError> {
        let m = self.minute_of_week(t);
        self.rules
            .iter()
            .find(|r| r.matches(m))
            .map(|r| &r.band)
            .or(self.default_band.as_ref())
            .ok_or(PlantError::ScheduleGap { step: t, minute_of_week: m })
    }

    /// Checks totality, non-overlap and band ordering over every minute of the week.
    pub fn validate(&self) -> Result<(), PlantError> {
        if self.dt_minutes == 0 {
            return Err(PlantError::Config("schedule dt must be positive".into()));
        }
        for band in self.rules.iter().map(|r| &r.band).chain(self.default_band.as_ref()) {
            if band.lb.len() != band.ub.len() || band.lb.iter().zip(&band.ub).any(|(l, u)| !(l <= u)) {
                return Err(PlantError::Config(format!("ill-ordered comfort band {band:?}")));
            }
        }
        for m in 0..MINUTES_PER_WEEK {
            let hits = self.rules.iter().filter(|r| r.matches(m)).count();
            if hits > 1 {
                return Err(PlantError::Config(format!("overlapping comfort rules at minute {m}")));
            }
            if hits == 0 && self.default_band.is_none() {
                return Err(PlantError::ScheduleGap {
                    step: -1,
                    minute_of_week: m,
                });
            }
        }
        Ok(())
    }

    /// Envelope `(min lb, max ub)` per output over the whole week.
    pub fn envelope(&self) -> Band {
        let bands: Vec<&Band> = self.rules.iter().map(|r| &r.band).chain(self.default_band.as_ref()).collect();
        let n = bands.first().map_or(0, |b| b.lb.len());
        Band {
            lb: (0..n).map(|j| bands.iter().map(|b| b.lb[j]).fold(f64::INFINITY, f64::min)).collect(),
            ub: (0..n).map(|j| bands.iter().map(|b| b.ub[j]).fold(f64::NEG_INFINITY, f64::max)).collect(),
        }
    }
}
