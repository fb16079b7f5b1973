//! Affine multi-step output predictor from Hankel data.
//!
//! The inner problem
//!
//! ```text
//! min_g ½‖H_{y,init} g − y_init‖² + ½ g'Q_g g
//! s.t.  [H_{u,init}; H_{w,init}; H_{u,pred}; H_{w,pred}] g = [u_init; w_init; u_pred; w_pred]
//! ```
//!
//! is an equality-constrained convex QP, so its minimiser is linear in the
//! right-hand side. [`assemble`] factors the KKT matrix once and extracts the
//! maps `Phi_z`, `Phi_u`, `Phi_w` with `y_pred = Phi_z z + Phi_u u_pred + Phi_w w_pred`,
//! where `z = [y_init; u_init; w_init]`.

use std::io::{Read, Write};

use log::warn;
use nalgebra::{DMatrix, DVector, LU};
use thiserror::Error;

use crate::trajdata::{Dims, HankelBundle};

/// Ridge added to the `g` block when `Q_g = 0` leaves the KKT matrix singular.
pub const ZERO_QG_RIDGE: f64 = 1e-10;

const MAGIC: &[u8; 4] = b"DPHI";

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("KKT system is singular (pivot ratio {cond_estimate:e})")]
    SingularKkt { cond_estimate: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad predictor file: {0}")]
    Format(String),
}

/// Diagonal regularisation weight on `g`.
#[derive(Debug, Clone, PartialEq)]
pub enum QgWeight {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl QgWeight {
    fn diag(&self, n: usize) -> Result<Vec<f64>, PredictorError> {
        let d = match self {
            QgWeight::Scalar(v) => vec![*v; n],
            QgWeight::Diagonal(d) if d.len() == n => d.clone(),
            QgWeight::Diagonal(d) => {
                return Err(PredictorError::DimensionMismatch(format!(
                    "Q_g has {} entries for {n} Hankel columns",
                    d.len()
                )))
            }
        };
        if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PredictorError::DimensionMismatch(
                "Q_g must be finite and nonnegative".into(),
            ));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone)]
pub struct AffinePredictor {
    pub phi_z: DMatrix<f64>,
    pub phi_u: DMatrix<f64>,
    pub phi_w: DMatrix<f64>,
    pub q_g: Vec<f64>,
    pub t_init: usize,
    pub horizon: usize,
    pub dims: Dims,
    pub bundle_stamp: u64,
}

/// Ratio of smallest to largest |pivot| of an LU factorisation: a cheap
/// conditioning indicator.
fn pivot_ratio(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let u = lu.u();
    let d = u.diagonal();
    let max = d.amax();
    if max == 0.0 {
        0.0
    } else {
        d.amin() / max
    }
}

const PIVOT_FLOOR: f64 = 1e-15;

fn factor_checked(k: DMatrix<f64>) -> Result<LU<f64, nalgebra::Dyn, nalgebra::Dyn>, PredictorError> {
    let lu = k.lu();
    let ratio = pivot_ratio(&lu);
    if !lu.is_invertible() || ratio < PIVOT_FLOOR {
        return Err(PredictorError::SingularKkt {
            cond_estimate: ratio,
        });
    }
    Ok(lu)
}

/// Equality-constraint rows `[H_ui; H_wi; H_up; H_wp]`.
fn equality_rows(b: &HankelBundle) -> DMatrix<f64> {
    let parts = [b.u_init(), b.w_init(), b.u_pred(), b.w_pred()];
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut e = DMatrix::zeros(rows, b.column_count());
    let mut r = 0;
    for p in parts {
        e.rows_mut(r, p.nrows()).copy_from(&p);
        r += p.nrows();
    }
    e
}

fn check_bundle(bundle: &HankelBundle, t_init: usize, horizon: usize) -> Result<(), PredictorError> {
    if bundle.t_init != t_init || bundle.horizon != horizon {
        return Err(PredictorError::DimensionMismatch(format!(
            "bundle has depth {}+{}, predictor wants {t_init}+{horizon}",
            bundle.t_init, bundle.horizon
        )));
    }
    Ok(())
}

/// Builds the reduced KKT matrix `[M, E'; E, 0]` with `M = H_yi'H_yi + diag(q)`.
fn reduced_kkt(bundle: &HankelBundle, e: &DMatrix<f64>, q: &[f64]) -> DMatrix<f64> {
    let n = bundle.column_count();
    let ne = e.nrows();
    let hyi = bundle.y_init();
    let mut k = DMatrix::zeros(n + ne, n + ne);
    {
        let mut m = k.view_mut((0, 0), (n, n));
        m.gemm(1.0, &hyi.transpose(), &hyi, 0.0);
        for (i, qi) in q.iter().enumerate() {
            m[(i, i)] += qi;
        }
    }
    k.view_mut((n, 0), (ne, n)).copy_from(e);
    k.view_mut((0, n), (n, ne)).copy_from(&e.transpose());
    k
}

/// Factors the inner KKT system once and extracts the affine prediction maps.
pub fn assemble(
    bundle: &HankelBundle,
    q_g: &QgWeight,
    t_init: usize,
    horizon: usize,
) -> Result<AffinePredictor, PredictorError> {
    check_bundle(bundle, t_init, horizon)?;
    let dims = bundle.dims;
    let n = bundle.column_count();
    let q = q_g.diag(n)?;
    let e = equality_rows(bundle);
    let ne = e.nrows();

    let mut k = reduced_kkt(bundle, &e, &q);
    let lu = match factor_checked(k.clone()) {
        Ok(lu) => lu,
        Err(err) if q.iter().all(|v| *v == 0.0) => {
            warn!("inner KKT singular with Q_g = 0 ({err}); adding ridge {ZERO_QG_RIDGE:e}");
            for i in 0..n {
                k[(i, i)] += ZERO_QG_RIDGE;
            }
            factor_checked(k)?
        }
        Err(err) => return Err(err),
    };

    // y_pred = [H_yp 0] K^{-1} rhs and K is symmetric, so one solve with
    // [H_yp'; 0] gives every column of the map at once.
    let hyp = bundle.y_pred();
    let ny_pred = hyp.nrows();
    let mut rhs = DMatrix::zeros(n + ne, ny_pred);
    rhs.view_mut((0, 0), (n, ny_pred)).copy_from(&hyp.transpose());
    let x = lu
        .solve(&rhs)
        .ok_or(PredictorError::SingularKkt { cond_estimate: 0.0 })?;
    let x_g = x.rows(0, n);
    let x_l = x.rows(n, ne);

    let phi_yinit = (bundle.y_init() * x_g).transpose();
    let phi_b = x_l.transpose();

    let (nui, nwi) = (t_init * dims.n_u, t_init * dims.n_w);
    let (nup, nwp) = (horizon * dims.n_u, horizon * dims.n_w);
    let nyi = t_init * dims.n_y;
    let mut phi_z = DMatrix::zeros(ny_pred, nyi + nui + nwi);
    phi_z.columns_mut(0, nyi).copy_from(&phi_yinit);
    phi_z.columns_mut(nyi, nui).copy_from(&phi_b.columns(0, nui));
    phi_z.columns_mut(nyi + nui, nwi).copy_from(&phi_b.columns(nui, nwi));
    let phi_u = phi_b.columns(nui + nwi, nup).into_owned();
    let phi_w = phi_b.columns(nui + nwi + nup, nwp).into_owned();

    Ok(AffinePredictor {
        phi_z,
        phi_u,
        phi_w,
        q_g: q,
        t_init,
        horizon,
        dims,
        bundle_stamp: bundle.stamp,
    })
}

impl AffinePredictor {
    pub fn z_len(&self) -> usize {
        self.dims.z_len(self.t_init)
    }

    pub fn check_dims(&self, z: usize, u: usize, w: usize) -> Result<(), PredictorError> {
        let want = (self.phi_z.ncols(), self.phi_u.ncols(), self.phi_w.ncols());
        if (z, u, w) != want {
            return Err(PredictorError::DimensionMismatch(format!(
                "predict got (z, u, w) lengths {:?}, expected {:?}",
                (z, u, w),
                want
            )));
        }
        Ok(())
    }

    /// The part of the prediction that does not depend on `u_pred`.
    pub fn free_response(&self, z: &DVector<f64>, w_pred: &DVector<f64>) -> Result<DVector<f64>, PredictorError> {
        self.check_dims(z.len(), self.phi_u.ncols(), w_pred.len())?;
        let mut out = &self.phi_z * z;
        out.gemv(1.0, &self.phi_w, w_pred, 1.0);
        Ok(out)
    }

    pub fn predict(
        &self,
        z: &DVector<f64>,
        u_pred: &DVector<f64>,
        w_pred: &DVector<f64>,
    ) -> Result<DVector<f64>, PredictorError> {
        self.check_dims(z.len(), u_pred.len(), w_pred.len())?;
        let mut out = &self.phi_z * z;
        out.gemv(1.0, &self.phi_u, u_pred, 1.0);
        out.gemv(1.0, &self.phi_w, w_pred, 1.0);
        Ok(out)
    }

    /// Little-endian dump: 16-byte header (`DPHI`, t_init, horizon, n_u, n_y,
    /// n_w as u16, 2 reserved bytes) followed by `Phi_z`, `Phi_u`, `Phi_w`
    /// row-major as f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<(), PredictorError> {
        let fields = [self.t_init, self.horizon, self.dims.n_u, self.dims.n_y, self.dims.n_w];
        out.write_all(MAGIC)?;
        for f in fields {
            let v = u16::try_from(f).map_err(|_| PredictorError::Format(format!("{f} exceeds u16")))?;
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&[0, 0])?;
        for m in [&self.phi_z, &self.phi_u, &self.phi_w] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.write_all(&m[(r, c)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self, PredictorError> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(PredictorError::Format("bad magic".into()));
        }
        let field = |k: usize| u16::from_le_bytes([header[4 + 2 * k], header[5 + 2 * k]]) as usize;
        let (t_init, horizon) = (field(0), field(1));
        let dims = Dims::new(field(2), field(3), field(4));
        let rows = horizon * dims.n_y;
        let mut read = |cols: usize| -> Result<DMatrix<f64>, PredictorError> {
            let mut m = DMatrix::zeros(rows, cols);
            let mut buf = [0u8; 8];
            for r in 0..rows {
                for c in 0..cols {
                    input.read_exact(&mut buf)?;
                    m[(r, c)] = f64::from_le_bytes(buf);
                }
            }
            Ok(m)
        };
        let phi_z = read(dims.z_len(t_init))?;
        let phi_u = read(horizon * dims.n_u)?;
        let phi_w = read(horizon * dims.n_w)?;
        Ok(Self {
            phi_z,
            phi_u,
            phi_w,
            q_g: Vec::new(),
            t_init,
            horizon,
            dims,
            bundle_stamp: 0,
        })
    }
}

/// Minimiser of the inner problem for one specific right-hand side.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub g: DVector<f64>,
    pub delta_y: DVector<f64>,
    pub y_pred: DVector<f64>,
    pub objective: f64,
}

/// Solves the inner problem directly over `(g, δ_y)` with its full KKT system.
///
/// This keeps `δ_y` as an explicit variable with the constraint
/// `H_yi g − δ_y = y_init`, so it shares no factorisation with [`assemble`].
pub fn solve_inner_direct(
    bundle: &HankelBundle,
    q_g: &QgWeight,
    z: &DVector<f64>,
    u_pred: &DVector<f64>,
    w_pred: &DVector<f64>,
) -> Result<InnerSolution, PredictorError> {
    let dims = bundle.dims;
    let t = bundle.t_init;
    let n = bundle.column_count();
    let q = q_g.diag(n)?;
    let (nyi, nui, nwi) = (t * dims.n_y, t * dims.n_u, t * dims.n_w);
    if z.len() != nyi + nui + nwi
        || u_pred.len() != bundle.horizon * dims.n_u
        || w_pred.len() != bundle.horizon * dims.n_w
    {
        return Err(PredictorError::DimensionMismatch(
            "z/u_pred/w_pred lengths do not match the bundle".into(),
        ));
    }
    let e = equality_rows(bundle);
    let ne = e.nrows();
    // variables [g (n); δ (nyi)], constraints [H_yi g − δ = y_init (nyi); E g = b (ne)]
    let nv = n + nyi;
    let nc = nyi + ne;
    let mut k = DMatrix::zeros(nv + nc, nv + nc);
    for i in 0..n {
        k[(i, i)] = q[i];
    }
    for i in 0..nyi {
        k[(n + i, n + i)] = 1.0;
    }
    let mut c = DMatrix::zeros(nc, nv);
    c.view_mut((0, 0), (nyi, n)).copy_from(&bundle.y_init());
    for i in 0..nyi {
        c[(i, n + i)] = -1.0;
    }
    c.view_mut((nyi, 0), (ne, n)).copy_from(&e);
    k.view_mut((nv, 0), (nc, nv)).copy_from(&c);
    k.view_mut((0, nv), (nv, nc)).copy_from(&c.transpose());

    let mut rhs = DVector::zeros(nv + nc);
    rhs.rows_mut(nv, nyi).copy_from(&z.rows(0, nyi));
    let mut off = nv + nyi;
    for part in [z.rows(nyi, nui), z.rows(nyi + nui, nwi), u_pred.rows(0, u_pred.len()), w_pred.rows(0, w_pred.len())] {
        rhs.rows_mut(off, part.len()).copy_from(&part);
        off += part.len();
    }

    let lu = match factor_checked(k.clone()) {
        Ok(lu) => lu,
        Err(err) if q.iter().all(|v| *v == 0.0) => {
            warn!("direct inner KKT singular with Q_g = 0 ({err}); adding ridge {ZERO_QG_RIDGE:e}");
            for i in 0..n {
                k[(i, i)] += ZERO_QG_RIDGE;
            }
            factor_checked(k)?
        }
        Err(err) => return Err(err),
    };
    let sol = lu
        .solve(&rhs)
        .ok_or(PredictorError::SingularKkt { cond_estimate: 0.0 })?;
    let g = sol.rows(0, n).into_owned();
    let delta_y = sol.rows(n, nyi).into_owned();
    let y_pred = bundle.y_pred() * &g;
    let objective = inner_objective(&g, &delta_y, &q);
    Ok(InnerSolution {
        g,
        delta_y,
        y_pred,
        objective,
    })
}

/// `½‖δ‖² + ½ g' diag(q) g`.
pub fn inner_objective(g: &DVector<f64>, delta_y: &DVector<f64>, q: &[f64]) -> f64 {
    let reg: f64 = g.iter().zip(q).map(|(gi, qi)| qi * gi * gi).sum();
    0.5 * delta_y.norm_squared() + 0.5 * reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajdata::{build_mosaic, TrajectoryStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// x+ = 0.8x + 0.5u + 0.2w, y = x+ (output after the step), random u and w.
    fn scalar_store(len: usize, noise: f64, seed: u64) -> TrajectoryStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = TrajectoryStore::new(Dims::new(1, 1, 1));
        let mut x = 0.0;
        for k in 0..len {
            let u: f64 = rng.sample(StandardNormal);
            let w: f64 = rng.sample(StandardNormal);
            x = 0.8 * x + 0.5 * u + 0.2 * w;
            let e: f64 = rng.sample(StandardNormal);
            s.push(k as i64, 0, vec![u], vec![x + noise * e], vec![w]).unwrap();
        }
        s
    }

    #[test]
    fn reproduces_step_response() {
        let (t_init, n) = (3, 10);
        let store = scalar_store(120, 0.0, 1);
        let b = build_mosaic(&store, t_init, n).unwrap();
        let p = assemble(&b, &QgWeight::Scalar(0.0), t_init, n).unwrap();
        // past at rest, unit step input, no disturbance
        let z = DVector::zeros(3 * t_init);
        let u = DVector::from_element(n, 1.0);
        let w = DVector::zeros(n);
        let y = p.predict(&z, &u, &w).unwrap();
        let mut x = 0.0;
        for i in 0..n {
            x = 0.8 * x + 0.5;
            assert!((y[i] - x).abs() <= 1e-6, "step {i}: {} vs {x}", y[i]);
        }
    }

    #[test]
    fn zero_in_zero_out_and_linearity() {
        let store = scalar_store(80, 0.05, 2);
        let b = build_mosaic(&store, 2, 5).unwrap();
        let p = assemble(&b, &QgWeight::Scalar(0.01), 2, 5).unwrap();
        let zero = p.predict(&DVector::zeros(6), &DVector::zeros(5), &DVector::zeros(5)).unwrap();
        assert_eq!(zero.amax(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rv = |n: usize| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (z1, u1, w1, z2, u2, w2) = (rv(6), rv(5), rv(5), rv(6), rv(5), rv(5));
        let lhs = p.predict(&z1, &u1, &w1).unwrap() + p.predict(&z2, &u2, &w2).unwrap();
        let rhs = p.predict(&(&z1 + &z2), &(&u1 + &u2), &(&w1 + &w2)).unwrap();
        assert!((lhs - rhs).amax() < 1e-10);
        assert!(matches!(
            p.predict(&DVector::zeros(5), &u1, &w1),
            Err(PredictorError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn consistent_initial_condition_needs_no_slack() {
        let store = scalar_store(80, 0.0, 4);
        let b = build_mosaic(&store, 2, 4).unwrap();
        // take a recorded window as the query
        let col = 17;
        let z = DVector::from_vec(vec![
            b.h_y[(0, col)], b.h_y[(1, col)], b.h_u[(0, col)], b.h_u[(1, col)], b.h_w[(0, col)], b.h_w[(1, col)],
        ]);
        let u = b.u_pred().column(col).into_owned();
        let w = b.w_pred().column(col).into_owned();
        let sol = solve_inner_direct(&b, &QgWeight::Scalar(0.0), &z, &u, &w).unwrap();
        assert!(sol.delta_y.amax() < 1e-8);
        assert!((sol.y_pred - b.y_pred().column(col)).amax() < 1e-6);
    }

    #[test]
    fn direct_solution_beats_feasible_perturbations() {
        let store = scalar_store(60, 0.1, 5);
        let b = build_mosaic(&store, 2, 3).unwrap();
        let q = QgWeight::Scalar(0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rv = |n: usize| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (z, u, w) = (rv(6), rv(3), rv(3));
        let sol = solve_inner_direct(&b, &q, &z, &u, &w).unwrap();
        // feasible perturbations live in the null space of the equality rows
        let e = equality_rows(&b);
        let full = e.ncols();
        let qd = q.diag(full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ete = e.transpose() * &e;
        let eig = ete.symmetric_eigen();
        let null: Vec<DVector<f64>> = (0..full)
            .filter(|&k| eig.eigenvalues[k].abs() < 1e-9 * eig.eigenvalues.amax())
            .map(|k| eig.eigenvectors.column(k).into_owned())
            .collect();
        assert!(!null.is_empty());
        for _ in 0..100 {
            let mut dg = DVector::zeros(full);
            for v in &null {
                dg += v * rng.sample::<f64, _>(StandardNormal) * 0.1;
            }
            let g = &sol.g + dg;
            let delta = b.y_init() * &g - z.rows(0, 2);
            assert!(inner_objective(&g, &delta, &qd) >= sol.objective - 1e-12);
        }
    }

    #[test]
    fn binary_round_trip() {
        let store = scalar_store(50, 0.1, 8);
        let b = build_mosaic(&store, 2, 4).unwrap();
        let p = assemble(&b, &QgWeight::Scalar(0.01), 2, 4).unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * 4 * (6 + 4 + 4));
        let back = AffinePredictor::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.phi_z, p.phi_z);
        assert_eq!(back.phi_u, p.phi_u);
        assert_eq!(back.phi_w, p.phi_w);
        assert!(AffinePredictor::read_binary(&b"NOPE0000000000000000"[..]).is_err());
    }

    #[test]
    fn rejects_mismatched_depth() {
        let store = scalar_store(50, 0.1, 9);
        let b = build_mosaic(&store, 2, 4).unwrap();
        assert!(matches!(
            assemble(&b, &QgWeight::Scalar(0.01), 3, 3),
            Err(PredictorError::DimensionMismatch(_))
        ));
    }
}
