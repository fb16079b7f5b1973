//! Historical input/output trajectories and (mosaic) Hankel matrices.
//!
//! Records are stored time-major. Each record holds the input applied at a
//! step, the external input acting during that step and the output measured
//! at the end of it, so a single record is one full sample of the behaviour.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector};
use thiserror::Error;

/// Relative singular-value cutoff used for numeric rank.
pub const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("sequence of length {len} is shorter than Hankel depth {depth}")]
    SequenceTooShort { len: usize, depth: usize },
    #[error("no segment reaches the Hankel depth {depth}")]
    NoUsableSegment { depth: usize },
    #[error("dimension mismatch for {signal}: expected {expected}, got {got}")]
    DimensionMismatch {
        signal: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("record at step {step} contains a non-finite value")]
    NonFinite { step: i64 },
    #[error("step {step} does not increase past {last} within segment {seg}")]
    NonIncreasingStep { step: i64, last: i64, seg: u32 },
    #[error("malformed trajectory csv: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Signal dimensions `(n_u, n_y, n_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n_u: usize,
    pub n_y: usize,
    pub n_w: usize,
}

impl Dims {
    pub fn new(n_u: usize, n_y: usize, n_w: usize) -> Self {
        Self { n_u, n_y, n_w }
    }

    /// Length of the initial-condition vector for `t_init` past samples.
    pub fn z_len(&self, t_init: usize) -> usize {
        t_init * (self.n_y + self.n_u + self.n_w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub step: i64,
    pub seg: u32,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

/// Time-indexed I/O records with segment boundaries.
///
/// When a capacity is set the store behaves as a ring buffer holding the
/// most recent records only.
#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    dims: Dims,
    records: VecDeque<Record>,
    capacity: Option<usize>,
}

impl TrajectoryStore {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            records: VecDeque::new(),
            capacity: None,
        }
    }

    pub fn with_capacity_limit(dims: Dims, capacity: usize) -> Self {
        Self {
            dims,
            records: VecDeque::with_capacity(capacity + 1),
            capacity: Some(capacity),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Record> {
        self.records.get(index)
    }

    pub fn last(&self) -> Option<&Record> {
        self.records.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Record> {
        self.records.iter()
    }

    pub fn push(
        &mut self,
        step: i64,
        seg: u32,
        u: Vec<f64>,
        y: Vec<f64>,
        w: Vec<f64>,
    ) -> Result<(), TrajError> {
        check_dim("u", self.dims.n_u, u.len())?;
        check_dim("y", self.dims.n_y, y.len())?;
        check_dim("w", self.dims.n_w, w.len())?;
        if u.iter().chain(&y).chain(&w).any(|v| !v.is_finite()) {
            return Err(TrajError::NonFinite { step });
        }
        if let Some(last) = self.records.back() {
            if last.seg == seg && step <= last.step {
                return Err(TrajError::NonIncreasingStep {
                    step,
                    last: last.step,
                    seg,
                });
            }
        }
        self.records.push_back(Record { step, seg, u, y, w });
        if let Some(cap) = self.capacity {
            while self.records.len() > cap {
                self.records.pop_front();
            }
        }
        Ok(())
    }

    /// Index ranges of the contiguous segments, in storage order.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].seg != self.records[i - 1].seg {
                if i > start {
                    out.push(start..i);
                }
                start = i;
            }
        }
        out
    }

    /// Copy of the records in `range` as a new store with the same dimensions.
    pub fn slice(&self, range: Range<usize>) -> TrajectoryStore {
        let mut out = TrajectoryStore::new(self.dims);
        out.records = self.records.range(range).cloned().collect();
        out
    }

    pub fn signal(&self, range: Range<usize>, which: Signal) -> Vec<&[f64]> {
        self.records
            .range(range)
            .map(|r| match which {
                Signal::U => r.u.as_slice(),
                Signal::Y => r.y.as_slice(),
                Signal::W => r.w.as_slice(),
            })
            .collect()
    }

    /// Time-major stack of one signal over `range`.
    pub fn stacked(&self, range: Range<usize>, which: Signal) -> DVector<f64> {
        let parts = self.signal(range, which);
        DVector::from_iterator(
            parts.iter().map(|p| p.len()).sum(),
            parts.into_iter().flatten().copied(),
        )
    }

    /// Initial-condition vector `[y_init; u_init; w_init]` from the records in `range`.
    pub fn z_vector(&self, range: Range<usize>) -> DVector<f64> {
        let y = self.stacked(range.clone(), Signal::Y);
        let u = self.stacked(range.clone(), Signal::U);
        let w = self.stacked(range, Signal::W);
        DVector::from_iterator(
            y.len() + u.len() + w.len(),
            y.iter().chain(u.iter()).chain(w.iter()).copied(),
        )
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TrajError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["step".to_string(), "seg".to_string()];
        header.extend((0..self.dims.n_u).map(|i| format!("u{i}")));
        header.extend((0..self.dims.n_y).map(|i| format!("y{i}")));
        header.extend((0..self.dims.n_w).map(|i| format!("w{i}")));
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.seg.to_string()];
            row.extend(r.u.iter().chain(&r.y).chain(&r.w).map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a store written by [`TrajectoryStore::write_csv`]; dimensions are
    /// inferred from the header.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TrajError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let count = |prefix: char| {
            header
                .iter()
                .filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok())
                .count()
        };
        if header.get(0) != Some("step") || header.get(1) != Some("seg") {
            return Err(TrajError::Format("header must start with step,seg".into()));
        }
        let dims = Dims::new(count('u'), count('y'), count('w'));
        if dims.n_u + dims.n_y + dims.n_w + 2 != header.len() {
            return Err(TrajError::Format("unexpected header columns".into()));
        }
        let mut store = TrajectoryStore::new(dims);
        for row in rdr.records() {
            let row = row?;
            let step: i64 = parse_field(&row, 0)?;
            let seg: u32 = parse_field(&row, 1)?;
            let mut vals = Vec::with_capacity(row.len() - 2);
            for k in 2..row.len() {
                vals.push(parse_field::<f64>(&row, k)?);
            }
            let (u, rest) = vals.split_at(dims.n_u);
            let (y, w) = rest.split_at(dims.n_y);
            store.push(step, seg, u.to_vec(), y.to_vec(), w.to_vec())?;
        }
        Ok(store)
    }
}

fn parse_field<T: std::str::FromStr>(row: &csv::StringRecord, k: usize) -> Result<T, TrajError> {
    row.get(k)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| TrajError::Format(format!("bad field {k} in row {:?}", row.position())))
}

fn check_dim(signal: &'static str, expected: usize, got: usize) -> Result<(), TrajError> {
    if expected == got {
        Ok(())
    } else {
        Err(TrajError::DimensionMismatch {
            signal,
            expected,
            got,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    U,
    Y,
    W,
}

/// Block Hankel matrix of depth `depth`: block-row `i`, column `j` holds `seq[i + j]`.
pub fn build_hankel<S: AsRef<[f64]>>(seq: &[S], depth: usize) -> Result<DMatrix<f64>, TrajError> {
    if depth == 0 || seq.len() < depth {
        return Err(TrajError::SequenceTooShort {
            len: seq.len(),
            depth,
        });
    }
    let n = seq[0].as_ref().len();
    let cols = seq.len() - depth + 1;
    let mut h = DMatrix::zeros(depth * n, cols);
    for j in 0..cols {
        for i in 0..depth {
            let v = seq[i + j].as_ref();
            if v.len() != n {
                return Err(TrajError::DimensionMismatch {
                    signal: "hankel",
                    expected: n,
                    got: v.len(),
                });
            }
            for (k, &x) in v.iter().enumerate() {
                h[(i * n + k, j)] = x;
            }
        }
    }
    Ok(h)
}

/// Hankel matrices for `u`, `y`, `w` with a common column layout.
#[derive(Debug, Clone)]
pub struct HankelBundle {
    pub h_u: DMatrix<f64>,
    pub h_y: DMatrix<f64>,
    pub h_w: DMatrix<f64>,
    pub t_init: usize,
    pub horizon: usize,
    pub dims: Dims,
    /// Identifies the data this bundle was built from (first/last step and column count).
    pub stamp: u64,
}

impl HankelBundle {
    pub fn depth(&self) -> usize {
        self.t_init + self.horizon
    }

    pub fn column_count(&self) -> usize {
        self.h_u.ncols()
    }

    pub fn u_init(&self) -> DMatrixView<'_, f64> {
        self.h_u.rows(0, self.t_init * self.dims.n_u)
    }
    pub fn u_pred(&self) -> DMatrixView<'_, f64> {
        self.h_u
            .rows(self.t_init * self.dims.n_u, self.horizon * self.dims.n_u)
    }
    pub fn y_init(&self) -> DMatrixView<'_, f64> {
        self.h_y.rows(0, self.t_init * self.dims.n_y)
    }
    pub fn y_pred(&self) -> DMatrixView<'_, f64> {
        self.h_y
            .rows(self.t_init * self.dims.n_y, self.horizon * self.dims.n_y)
    }
    pub fn w_init(&self) -> DMatrixView<'_, f64> {
        self.h_w.rows(0, self.t_init * self.dims.n_w)
    }
    pub fn w_pred(&self) -> DMatrixView<'_, f64> {
        self.h_w
            .rows(self.t_init * self.dims.n_w, self.horizon * self.dims.n_w)
    }
}

/// Concatenates per-segment Hankel matrices; segments shorter than the depth are skipped.
pub fn build_mosaic(
    store: &TrajectoryStore,
    t_init: usize,
    horizon: usize,
) -> Result<HankelBundle, TrajError> {
    let depth = t_init + horizon;
    let usable: Vec<Range<usize>> = store
        .segments()
        .into_iter()
        .filter(|r| r.len() >= depth && depth > 0)
        .collect();
    if usable.is_empty() {
        return Err(TrajError::NoUsableSegment { depth });
    }
    let dims = store.dims();
    let cols: usize = usable.iter().map(|r| r.len() - depth + 1).sum();
    let mut h_u = DMatrix::zeros(depth * dims.n_u, cols);
    let mut h_y = DMatrix::zeros(depth * dims.n_y, cols);
    let mut h_w = DMatrix::zeros(depth * dims.n_w, cols);
    let mut offset = 0;
    for range in &usable {
        for (dst, which) in [(&mut h_u, Signal::U), (&mut h_y, Signal::Y), (&mut h_w, Signal::W)] {
            let part = build_hankel(&store.signal(range.clone(), which), depth)?;
            dst.columns_mut(offset, part.ncols()).copy_from(&part);
        }
        offset += range.len() - depth + 1;
    }
    let first = store.get(usable[0].start).map_or(0, |r| r.step);
    let last = store
        .get(usable[usable.len() - 1].end - 1)
        .map_or(0, |r| r.step);
    let stamp = (first as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (last as u64).rotate_left(21)
        ^ cols as u64;
    Ok(HankelBundle {
        h_u,
        h_y,
        h_w,
        t_init,
        horizon,
        dims,
        stamp,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeReport {
    pub exciting: bool,
    pub rank: usize,
    pub rows: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

/// Numeric rank of a matrix with the relative cutoff [`RANK_TOLERANCE`].
pub fn numeric_rank(m: &DMatrix<f64>) -> (usize, f64, f64) {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if smax == 0.0 {
        return (0, 0.0, 0.0);
    }
    let rank = sv.iter().filter(|&&s| s > RANK_TOLERANCE * smax).count();
    (rank, smax, smin)
}

/// Whether `u_seq` is persistently exciting of the given order (full row rank Hankel).
pub fn is_persistently_exciting<S: AsRef<[f64]>>(
    u_seq: &[S],
    order: usize,
) -> Result<PeReport, TrajError> {
    let h = build_hankel(u_seq, order)?;
    let rows = h.nrows();
    let (rank, sigma_max, sigma_min) = numeric_rank(&h);
    Ok(PeReport {
        exciting: rank == rows,
        rank,
        rows,
        sigma_max,
        sigma_min,
    })
}
