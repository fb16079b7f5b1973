//! Dense convex QP solver.
//!
//! Solves `min ½x'Px + q'x  s.t. Gx ≤ h, Ax = b` with a Mehrotra
//! predictor-corrector primal-dual interior-point method. Inequality rows with
//! a single nonzero (plain variable bounds) are folded into the normal matrix
//! as diagonal terms, which keeps box-heavy control problems cheap.

use nalgebra::{Cholesky, DMatrix, DVector, LU};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("P is not symmetric (max asymmetry {0:e})")]
    NonSymmetricP(f64),
    #[error("problem data contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        let prob = Self { p, q, g, h, a, b };
        prob.validate()?;
        Ok(prob)
    }

    /// Problem with inequality constraints only.
    pub fn inequality(
        p: DMatrix<f64>,
        q: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        Self::new(p, q, g, h, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.g.nrows()
    }

    pub fn num_eq(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.q.len();
        let dim = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(QpError::DimensionMismatch(format!(
                    "{what} is {}x{}, expected {}x{}",
                    got.0, got.1, want.0, want.1
                )))
            }
        };
        dim("P", self.p.shape(), (n, n))?;
        dim("G", self.g.shape(), (self.h.len(), n))?;
        dim("A", self.a.shape(), (self.b.len(), n))?;
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&self.p)
            && finite(&self.g)
            && finite(&self.a)
            && self.q.iter().chain(self.h.iter()).chain(self.b.iter()).all(|v| v.is_finite()))
        {
            return Err(QpError::NonFinite);
        }
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-12 * self.p.amax().max(1.0) {
            return Err(QpError::NonSymmetricP(asym));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-7,
            tol_feas: 1e-7,
            max_iter: 20000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda_ineq: DVector<f64>,
    pub nu_eq: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Row split of `G` into plain bounds and general rows.
struct RowSplit {
    singles: Vec<(usize, usize, f64)>,
    general: Vec<usize>,
    g_gen: DMatrix<f64>,
}

impl RowSplit {
    fn new(g: &DMatrix<f64>) -> Self {
        let mut singles = Vec::new();
        let mut general = Vec::new();
        for r in 0..g.nrows() {
            let row = g.row(r);
            let mut nz = row.iter().enumerate().filter(|(_, v)| **v != 0.0);
            match (nz.next(), nz.next()) {
                (Some((c, &v)), None) => singles.push((r, c, v)),
                (None, _) => singles.push((r, 0, 0.0)),
                _ => general.push(r),
            }
        }
        let n = g.ncols();
        let mut g_gen = DMatrix::zeros(general.len(), n);
        for (k, &r) in general.iter().enumerate() {
            g_gen.row_mut(k).copy_from(&g.row(r));
        }
        Self {
            singles,
            general,
            g_gen,
        }
    }
}

/// Variables that can be eliminated from the normal equations in closed
/// form: their Hessian row is diagonal, they have no equality coefficients,
/// and no general inequality row touches two of them. Soft-constraint slacks
/// are the typical case.
const MAX_SEPARABLE_ROWS: usize = 4;

struct Separable {
    dense: Vec<usize>,
    sep: Vec<usize>,
    /// For each separable variable, its `(general row, coefficient)` pairs.
    rows: Vec<Vec<(usize, f64)>>,
    /// General-row block on the dense variables.
    g_dense: DMatrix<f64>,
}

impl Separable {
    fn detect(prob: &QpProblem, split: &RowSplit) -> Option<Self> {
        let n = prob.num_vars();
        if prob.num_eq() > 0 || split.general.is_empty() {
            return None;
        }
        let mut cand: Vec<(usize, Vec<(usize, f64)>)> = (0..n)
            .filter(|&c| (0..n).all(|j| j == c || prob.p[(c, j)] == 0.0))
            .map(|c| {
                let touched = (0..split.general.len())
                    .filter_map(|k| {
                        let v = split.g_gen[(k, c)];
                        (v != 0.0).then_some((k, v))
                    })
                    .collect::<Vec<_>>();
                (c, touched)
            })
            .filter(|(_, t)| t.len() <= MAX_SEPARABLE_ROWS)
            .collect();
        // sparsest columns first, so slacks win over inputs
        cand.sort_by_key(|(c, t)| (t.len(), *c));
        let mut row_used = vec![false; split.general.len()];
        let mut is_sep = vec![false; n];
        let mut picked = Vec::new();
        for (c, touched) in cand {
            if touched.iter().all(|(k, _)| !row_used[*k]) {
                for (k, _) in &touched {
                    row_used[*k] = true;
                }
                is_sep[c] = true;
                picked.push((c, touched));
            }
        }
        picked.sort_by_key(|(c, _)| *c);
        let dense: Vec<usize> = (0..n).filter(|&c| !is_sep[c]).collect();
        let (sep, rows): (Vec<usize>, Vec<_>) = picked.into_iter().unzip();
        // only worthwhile when a sizeable block disappears
        if sep.len() < 2 || dense.is_empty() {
            return None;
        }
        let g_dense = split.g_gen.select_columns(dense.iter());
        Some(Self {
            dense,
            sep,
            rows,
            g_dense,
        })
    }
}

enum Factor {
    Chol(Cholesky<f64, nalgebra::Dyn>),
    Lu(LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
    /// Schur complement on the dense block plus the eliminated diagonal.
    Schur {
        chol: Cholesky<f64, nalgebra::Dyn>,
        coupling: DMatrix<f64>,
        diag: DVector<f64>,
    },
}

struct Newton<'a> {
    prob: &'a QpProblem,
    split: &'a RowSplit,
    sep: Option<Separable>,
    /// Fixed diagonal regularisation, relative to the unscaled data.
    reg: f64,
}

impl<'a> Newton<'a> {
    fn new(prob: &'a QpProblem, split: &'a RowSplit) -> Self {
        let scale = prob.p.amax().max(prob.g.amax()).max(prob.a.amax()).max(1.0);
        Self {
            prob,
            split,
            sep: Separable::detect(prob, split),
            reg: 1e-12 * scale,
        }
    }

    /// Diagonal of `P` plus the scaled plain-bound rows.
    fn base_diag(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut d = self.prob.p.diagonal();
        for &(r, c, v) in &self.split.singles {
            d[c] += w[r] * v * v;
        }
        d
    }

    /// `(P + G'WG) v` without forming the matrix.
    fn apply(&self, w: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.prob.p * v;
        for &(r, c, g) in &self.split.singles {
            out[c] += w[r] * g * g * v[c];
        }
        if !self.split.general.is_empty() {
            let mut t = &self.split.g_gen * v;
            for (k, &r) in self.split.general.iter().enumerate() {
                t[k] *= w[r];
            }
            out.gemv_tr(1.0, &self.split.g_gen, &t, 1.0);
        }
        out
    }

    fn factor(&self, w: &DVector<f64>) -> Option<Factor> {
        if let Some(sep) = &self.sep {
            return self.factor_schur(sep, w);
        }
        let n = self.prob.num_vars();
        let pe = self.prob.num_eq();
        let mut hmat = self.prob.p.clone();
        for &(r, c, v) in &self.split.singles {
            hmat[(c, c)] += w[r] * v * v;
        }
        if !self.split.general.is_empty() {
            let mut scaled = self.split.g_gen.clone();
            for (k, &r) in self.split.general.iter().enumerate() {
                scaled.row_mut(k).scale_mut(w[r].sqrt());
            }
            hmat.gemm(1.0, &scaled.transpose(), &scaled, 1.0);
        }
        if pe == 0 {
            let mut hreg = hmat.clone();
            for i in 0..n {
                hreg[(i, i)] += self.reg;
            }
            if let Some(ch) = Cholesky::new(hreg) {
                return Some(Factor::Chol(ch));
            }
        }
        let mut k = DMatrix::zeros(n + pe, n + pe);
        k.view_mut((0, 0), (n, n)).copy_from(&hmat);
        for i in 0..n {
            k[(i, i)] += self.reg;
        }
        if pe > 0 {
            k.view_mut((n, 0), (pe, n)).copy_from(&self.prob.a);
            k.view_mut((0, n), (n, pe)).copy_from(&self.prob.a.transpose());
            for i in n..n + pe {
                k[(i, i)] -= self.reg;
            }
        }
        let lu = k.lu();
        lu.is_invertible().then_some(Factor::Lu(lu))
    }

    fn factor_schur(&self, sep: &Separable, w: &DVector<f64>) -> Option<Factor> {
        let base = self.base_diag(w);
        let nd = sep.dense.len();
        let mut hmat = self.prob.p.select_rows(sep.dense.iter()).select_columns(sep.dense.iter());
        for (i, &c) in sep.dense.iter().enumerate() {
            hmat[(i, i)] = base[c] + self.reg;
        }
        // Eliminating slack j turns the weights of its rows K into
        // diag(w_K) − v v'/d_j with v = w_K∘g_K, which is PSD; its Cholesky
        // factor scales those rows so a single Gram product forms the Schur
        // complement.
        let mut scaled = sep.g_dense.clone();
        let mut touched = vec![false; self.split.general.len()];
        let mut diag = DVector::zeros(sep.sep.len());
        let mut coupling = DMatrix::zeros(nd, sep.sep.len());
        for (j, (&c, rows)) in sep.sep.iter().zip(&sep.rows).enumerate() {
            let own = base[c] + self.reg;
            let wg: Vec<f64> = rows.iter().map(|&(k, g)| w[self.split.general[k]] * g).collect();
            let d = own + rows.iter().zip(&wg).map(|(&(_, g), v)| v * g).sum::<f64>();
            diag[j] = d;
            for (&(k, _), v) in rows.iter().zip(&wg) {
                touched[k] = true;
                coupling.column_mut(j).axpy(*v, &sep.g_dense.row(k).transpose(), 1.0);
            }
            match rows.len() {
                0 => {}
                1 => {
                    let (k, g) = rows[0];
                    let wk = w[self.split.general[k]];
                    // w − w²g²/d = w·(d − w g²)/d, without cancellation
                    let f = (wk * (d - wk * g * g).max(own) / d).sqrt();
                    scaled.row_mut(k).scale_mut(f);
                }
                r => {
                    let mut blk = DMatrix::from_fn(r, r, |a, b| -wg[a] * wg[b] / d);
                    for (a, &(k, _)) in rows.iter().enumerate() {
                        blk[(a, a)] += w[self.split.general[k]];
                    }
                    let l = Cholesky::new(blk)?.l();
                    let g_rows = DMatrix::from_fn(r, nd, |a, col| sep.g_dense[(rows[a].0, col)]);
                    let out = l.tr_mul(&g_rows);
                    for (a, &(k, _)) in rows.iter().enumerate() {
                        scaled.row_mut(k).copy_from(&out.row(a));
                    }
                }
            }
        }
        for (k, &r) in self.split.general.iter().enumerate() {
            if !touched[k] {
                scaled.row_mut(k).scale_mut(w[r].sqrt());
            }
        }
        hmat.gemm(1.0, &scaled.transpose(), &scaled, 1.0);
        let chol = Cholesky::new(hmat)?;
        Some(Factor::Schur { chol, coupling, diag })
    }

    fn solve_once(&self, f: &Factor, rx: &DVector<f64>, ry: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = rx.len();
        match f {
            Factor::Chol(ch) => Some((ch.solve(rx), DVector::zeros(0))),
            Factor::Lu(lu) => {
                let mut rhs = DVector::zeros(n + ry.len());
                rhs.rows_mut(0, n).copy_from(rx);
                rhs.rows_mut(n, ry.len()).copy_from(ry);
                let sol = lu.solve(&rhs)?;
                Some((sol.rows(0, n).into_owned(), sol.rows(n, ry.len()).into_owned()))
            }
            Factor::Schur { chol, coupling, diag } => {
                let sep = self.sep.as_ref()?;
                let r_d = DVector::from_iterator(sep.dense.len(), sep.dense.iter().map(|&c| rx[c]));
                let r_s = DVector::from_iterator(sep.sep.len(), sep.sep.iter().map(|&c| rx[c]));
                let rhs = &r_d - coupling * r_s.component_div(diag);
                let x_d = chol.solve(&rhs);
                let x_s = (r_s - coupling.tr_mul(&x_d)).component_div(diag);
                let mut x = DVector::zeros(n);
                for (i, &c) in sep.dense.iter().enumerate() {
                    x[c] = x_d[i];
                }
                for (j, &c) in sep.sep.iter().enumerate() {
                    x[c] = x_s[j];
                }
                Some((x, DVector::zeros(0)))
            }
        }
    }

    /// Solve with iterative refinement against the unregularised system: a
    /// few correction steps, stopping once the residual stops mattering.
    fn solve(&self, f: &Factor, w: &DVector<f64>, rx: &DVector<f64>, ry: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        const MAX_REFINE: usize = 3;
        let (mut x, mut y) = self.solve_once(f, rx, ry)?;
        let scale = 1e-14 * rx.amax().max(ry.amax()).max(1.0);
        for _ in 0..MAX_REFINE {
            let mut r = rx - self.apply(w, &x);
            let mut r_eq = ry.clone();
            if ry.len() > 0 {
                r.gemv_tr(-1.0, &self.prob.a, &y, 1.0);
                r_eq.gemv(-1.0, &self.prob.a, &x, 1.0);
            }
            if r.amax().max(r_eq.amax()) <= scale {
                break;
            }
            let (dx, dy) = self.solve_once(f, &r, &r_eq)?;
            x += dx;
            if ry.len() > 0 {
                y += dy;
            }
        }
        Some((x, y))
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Largest step in `(0, 1]` keeping `v + t·dv ≥ 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

struct Residuals {
    dual: DVector<f64>,
    eq: DVector<f64>,
    ineq: DVector<f64>,
    mu: f64,
    max_comp: f64,
}

impl Residuals {
    fn kkt(&self) -> f64 {
        inf_norm(&self.dual)
            .max(inf_norm(&self.eq))
            .max(inf_norm(&self.ineq))
            .max(self.max_comp)
    }
}

fn residuals(
    prob: &QpProblem,
    x: &DVector<f64>,
    s: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Residuals {
    let mut dual = &prob.p * x + &prob.q;
    dual.gemv_tr(1.0, &prob.g, z, 1.0);
    dual.gemv_tr(1.0, &prob.a, y, 1.0);
    let eq = &prob.a * x - &prob.b;
    let ineq = &prob.g * x + s - &prob.h;
    let m = s.len();
    let comp = s.component_mul(z);
    let mu = if m > 0 { comp.sum() / m as f64 } else { 0.0 };
    let max_comp = if m > 0 { comp.amax() } else { 0.0 };
    Residuals {
        dual,
        eq,
        ineq,
        mu,
        max_comp,
    }
}

/// Solves the QP. Never panics on numerical trouble: factorization failures and
/// stalls end with [`QpStatus::MaxIter`] and the best iterate seen.
pub fn solve(prob: &QpProblem, cfg: &QpSettings) -> Result<QpSolution, QpError> {
    prob.validate()?;
    let n = prob.num_vars();
    let m = prob.num_ineq();
    let pe = prob.num_eq();
    let split = RowSplit::new(&prob.g);
    let newton = Newton::new(prob, &split);

    // Initial point from the equality-constrained least-squares problem with unit scaling.
    let ones = DVector::from_element(m, 1.0);
    let (mut x, mut y, mut s, mut z) = match newton.factor(&ones) {
        Some(f) => {
            let mut rx = -&prob.q;
            rx.gemv_tr(1.0, &prob.g, &prob.h, 1.0);
            match newton.solve(&f, &ones, &rx, &prob.b) {
                Some((x0, y0)) => {
                    let zt = &prob.g * &x0 - &prob.h;
                    let shift = |v: DVector<f64>| {
                        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                        if m == 0 || lo > 1e-8 {
                            v
                        } else {
                            v.add_scalar(1.0 - lo)
                        }
                    };
                    (x0, y0, shift(-&zt), shift(zt))
                }
                None => (DVector::zeros(n), DVector::zeros(pe), ones.clone(), ones.clone()),
            }
        }
        None => (DVector::zeros(n), DVector::zeros(pe), ones.clone(), ones.clone()),
    };
    if y.len() != pe {
        y = DVector::zeros(pe);
    }

    let mut best = (f64::INFINITY, x.clone(), z.clone(), y.clone());
    let mut stall = 0usize;
    let mut iter = 0usize;
    loop {
        let res = residuals(prob, &x, &s, &z, &y);
        let kkt = res.kkt();
        if kkt < best.0 * 0.999 {
            best = (kkt, x.clone(), z.clone(), y.clone());
            stall = 0;
        } else {
            stall += 1;
        }
        let converged = inf_norm(&res.dual) <= cfg.tol_kkt
            && inf_norm(&res.eq) <= cfg.tol_feas
            && inf_norm(&res.ineq) <= cfg.tol_feas
            && res.max_comp <= cfg.tol_kkt;
        if converged {
            return Ok(QpSolution {
                x,
                lambda_ineq: z,
                nu_eq: y,
                status: QpStatus::Optimal,
                kkt_residual: kkt,
                iterations: iter,
            });
        }
        if infeasibility_certificate(prob, &z, &y, cfg.tol_feas) {
            return Ok(QpSolution {
                x,
                lambda_ineq: z,
                nu_eq: y,
                status: QpStatus::Infeasible,
                kkt_residual: kkt,
                iterations: iter,
            });
        }
        if iter >= cfg.max_iter || stall > 40 {
            break;
        }
        iter += 1;

        let w = z.component_div(&s);
        let Some(fact) = newton.factor(&w) else {
            break;
        };
        let direction = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // dz = w∘(G dx + r_in) − r_c/s ; ds = −r_in − G dx
            let t = (z.component_mul(&res.ineq) - rc).component_div(&s);
            let mut rx = -&res.dual;
            rx.gemv_tr(-1.0, &prob.g, &t, 1.0);
            let ry = -&res.eq;
            let (dx, dy) = newton.solve(&fact, &w, &rx, &ry)?;
            let gdx = &prob.g * &dx;
            let dz = (&gdx + &res.ineq).component_mul(&w) - rc.component_div(&s);
            let ds = -&res.ineq - gdx;
            Some((dx, dy, ds, dz))
        };
        let rc_aff = s.component_mul(&z);
        let Some((_, _, ds_a, dz_a)) = direction(&rc_aff) else {
            break;
        };
        let step_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let rc = if m > 0 {
            let s_a = &s + &ds_a * step_aff;
            let z_a = &z + &dz_a * step_aff;
            let mu_aff = s_a.dot(&z_a) / m as f64;
            let sigma = (mu_aff / res.mu).clamp(0.0, 1.0).powi(3);
            &rc_aff + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * res.mu)
        } else {
            rc_aff
        };
        let Some((dx, dy, ds, dz)) = direction(&rc) else {
            break;
        };
        let step = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        let step = if m == 0 { 1.0 } else { step };
        x += &dx * step;
        y += &dy * step;
        s += &ds * step;
        z += &dz * step;
        // Keep strictly interior against round-off.
        s.apply(|v| *v = v.max(1e-300));
        z.apply(|v| *v = v.max(1e-300));
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    let (kkt, x, z, y) = best;
    let status = if infeasibility_certificate(prob, &z, &y, cfg.tol_feas) {
        QpStatus::Infeasible
    } else {
        QpStatus::MaxIter
    };
    Ok(QpSolution {
        x,
        lambda_ineq: z,
        nu_eq: y,
        status,
        kkt_residual: kkt,
        iterations: iter,
    })
}

/// Farkas-type test: `G'z + A'y ≈ 0` with `h'z + b'y < 0` and `z ≥ 0` proves
/// `{Gx ≤ h, Ax = b}` empty. Only meaningful once the duals have blown up.
fn infeasibility_certificate(prob: &QpProblem, z: &DVector<f64>, y: &DVector<f64>, tol: f64) -> bool {
    let scale = inf_norm(z).max(if y.is_empty() { 0.0 } else { inf_norm(y) });
    if scale < 1e6 {
        return false;
    }
    let zn = z / scale;
    let yn = y / scale;
    let mut lin = DVector::zeros(prob.num_vars());
    lin.gemv_tr(1.0, &prob.g, &zn, 0.0);
    lin.gemv_tr(1.0, &prob.a, &yn, 1.0);
    let gap = prob.h.dot(&zn) + prob.b.dot(&yn);
    inf_norm(&lin) <= tol.max(1e-9) * 10.0 && gap < -tol.max(1e-9)
}
