//! Split conformal bounds on per-step output prediction errors.
//!
//! For every prediction step `i` and output `j` the table keeps the absolute
//! residuals of the predictor on calibration data. The half-width of the
//! disturbance box at level `σ` is the `⌈n_cal(1−σ)⌉`-th smallest residual,
//! and `σ = 1` gives the zero box.

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;

use nalgebra::DVector;
use thiserror::Error;

use crate::predictor::{AffinePredictor, PredictorError};
use crate::trajdata::{Signal, TrajectoryStore};

/// Calibration is refused below this many anchors.
pub const MIN_ANCHORS: usize = 20;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("only {anchors} calibration anchors available, need at least {MIN_ANCHORS}")]
    InsufficientData { anchors: usize },
    #[error("residual table is empty at step {i}, output {j}")]
    EmptyTable { i: usize, j: usize },
    #[error("residual {0} is not a finite nonnegative number")]
    NonFiniteResidual(f64),
    #[error("sigma {0} outside [0, 1]")]
    SigmaOutOfRange(f64),
    #[error("index ({i}, {j}) outside the table")]
    OutOfRange { i: usize, j: usize },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Sorted residuals plus their insertion order for FIFO eviction.
#[derive(Debug, Clone, Default)]
struct ResidualWindow {
    sorted: Vec<f64>,
    fifo: VecDeque<f64>,
}

impl ResidualWindow {
    fn insert(&mut self, r: f64, cap: usize) {
        let pos = self.sorted.partition_point(|v| *v <= r);
        self.sorted.insert(pos, r);
        self.fifo.push_back(r);
        while self.fifo.len() > cap {
            if let Some(old) = self.fifo.pop_front() {
                let at = self.sorted.partition_point(|v| *v < old);
                self.sorted.remove(at);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantileTable {
    windows: Vec<ResidualWindow>,
    horizon: usize,
    n_y: usize,
    pub n_cal: usize,
    pub window_cap: usize,
}

impl QuantileTable {
    pub fn new(horizon: usize, n_y: usize, n_cal: usize, window_cap: usize) -> Self {
        Self {
            windows: vec![ResidualWindow::default(); horizon * n_y],
            horizon,
            n_y,
            n_cal,
            window_cap: window_cap.max(1),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    fn index(&self, i: usize, j: usize) -> Result<usize, ConformalError> {
        if i < self.horizon && j < self.n_y {
            Ok(i * self.n_y + j)
        } else {
            Err(ConformalError::OutOfRange { i, j })
        }
    }

    /// Sorted residuals at `(i, j)`.
    pub fn residuals(&self, i: usize, j: usize) -> Result<&[f64], ConformalError> {
        Ok(&self.windows[self.index(i, j)?].sorted)
    }

    pub fn push_residual(&mut self, i: usize, j: usize, r: f64) -> Result<(), ConformalError> {
        if !(r.is_finite() && r >= 0.0) {
            return Err(ConformalError::NonFiniteResidual(r));
        }
        let k = self.index(i, j)?;
        let cap = self.window_cap;
        self.windows[k].insert(r, cap);
        Ok(())
    }

    /// Half-width of the disturbance interval at `(i, j)` for level `sigma`.
    pub fn half_width(&self, i: usize, j: usize, sigma: f64) -> Result<f64, ConformalError> {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(ConformalError::SigmaOutOfRange(sigma));
        }
        let sorted = &self.windows[self.index(i, j)?].sorted;
        if sigma == 1.0 {
            return Ok(0.0);
        }
        if sorted.is_empty() {
            return Err(ConformalError::EmptyTable { i, j });
        }
        // guard against 0.8 * 10 = 8.000000000000002
        let rank = ((self.n_cal as f64) * (1.0 - sigma) - 1e-9).ceil().max(1.0) as usize;
        Ok(if rank > sorted.len() {
            sorted[sorted.len() - 1]
        } else {
            sorted[rank - 1]
        })
    }

    /// All half-widths at level `sigma`, time-major (`i * n_y + j`).
    pub fn half_widths(&self, sigma: f64) -> Result<Vec<f64>, ConformalError> {
        let mut out = Vec::with_capacity(self.windows.len());
        for i in 0..self.horizon {
            for j in 0..self.n_y {
                out.push(self.half_width(i, j, sigma)?);
            }
        }
        Ok(out)
    }

    /// Audit export: one row `i,j,r_1,r_2,…` per table cell.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ConformalError> {
        let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(writer);
        wtr.write_record(["i", "j", "residuals"])?;
        for i in 0..self.horizon {
            for j in 0..self.n_y {
                let mut row = vec![i.to_string(), j.to_string()];
                row.extend(self.residuals(i, j)?.iter().map(|r| r.to_string()));
                wtr.write_record(&row)?;
            }
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Anchor windows `start..start + t_init + horizon` fully inside one segment.
pub fn anchor_windows(store: &TrajectoryStore, t_init: usize, horizon: usize) -> Vec<usize> {
    let depth = t_init + horizon;
    store
        .segments()
        .into_iter()
        .filter(|r| r.len() >= depth)
        .flat_map(|r| r.start..=r.end - depth)
        .collect()
}

/// Absolute prediction residuals for the window starting at `start`, using the
/// recorded inputs over the horizon. Time-major, length `horizon * n_y`.
pub fn window_residuals(
    store: &TrajectoryStore,
    p: &AffinePredictor,
    start: usize,
) -> Result<DVector<f64>, ConformalError> {
    let init: Range<usize> = start..start + p.t_init;
    let pred = init.end..init.end + p.horizon;
    let z = store.z_vector(init);
    let u = store.stacked(pred.clone(), Signal::U);
    let w = store.stacked(pred.clone(), Signal::W);
    let y = store.stacked(pred, Signal::Y);
    let yhat = p.predict(&z, &u, &w)?;
    Ok((y - yhat).abs())
}

/// Calibrates the residual table from every admissible anchor in `store`.
pub fn calibrate(
    store: &TrajectoryStore,
    p: &AffinePredictor,
    t_init: usize,
    horizon: usize,
    window_cap: Option<usize>,
) -> Result<QuantileTable, ConformalError> {
    if p.t_init != t_init || p.horizon != horizon {
        return Err(PredictorError::DimensionMismatch("predictor depth differs from calibration depth".into()).into());
    }
    let anchors = anchor_windows(store, t_init, horizon);
    if anchors.len() < MIN_ANCHORS {
        return Err(ConformalError::InsufficientData {
            anchors: anchors.len(),
        });
    }
    let n_y = store.dims().n_y;
    let n_cal = anchors.len();
    let mut tab = QuantileTable::new(horizon, n_y, n_cal, window_cap.unwrap_or(n_cal));
    for start in anchors {
        let r = window_residuals(store, p, start)?;
        for i in 0..horizon {
            for j in 0..n_y {
                tab.push_residual(i, j, r[i * n_y + j])?;
            }
        }
    }
    Ok(tab)
}

/// Number of records a calibration run must collect so that `n_cal`
/// anchors are available.
pub fn records_for_anchors(n_cal: usize, t_init: usize, horizon: usize) -> usize {
    n_cal + t_init + horizon - 1
}
