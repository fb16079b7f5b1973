//! Shared fixtures for the integration tests: random linear systems, recorded
//! trajectories, and independent oracles for QP solutions.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dad_dpc::qpsolve::QpProblem;
use dad_dpc::trajdata::{Dims, TrajectoryStore};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(r))
}

pub fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gauss(r))
}

/// `x⁺ = A x + B_u u + B_w w`, `y = C x`.
#[derive(Debug, Clone)]
pub struct Lti {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

fn controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut blocks = DMatrix::zeros(n, n * b.ncols());
    let mut ak_b = b.clone();
    for k in 0..n {
        blocks.columns_mut(k * b.ncols(), b.ncols()).copy_from(&ak_b);
        ak_b = a * ak_b;
    }
    let sv = blocks.svd(false, false).singular_values;
    sv.min() > 1e-6 * sv.max()
}

fn observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    controllable(&a.transpose(), &c.transpose())
}

/// Random stable, controllable and observable system with spectral radius
/// at most 0.9.
pub fn random_lti(r: &mut ChaCha8Rng, n_x: usize, dims: Dims) -> Lti {
    loop {
        let mut a = random_mat(r, n_x, n_x);
        let rho = a.clone().complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max);
        if rho < 1e-3 {
            continue;
        }
        a *= r.random_range(0.3..0.9) / rho;
        let b_u = random_mat(r, n_x, dims.n_u);
        let b_w = random_mat(r, n_x, dims.n_w);
        let c = random_mat(r, dims.n_y, n_x);
        if controllable(&a, &b_u) && observable(&a, &c) {
            return Lti { a, b_u, b_w, c };
        }
    }
}

impl Lti {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    /// Simulates from `x0`; record k holds `(u_k, w_k, y_{k+1})`.
    pub fn record(
        &self,
        dims: Dims,
        x0: &DVector<f64>,
        u: &[DVector<f64>],
        w: &[DVector<f64>],
        y_noise: Option<(&mut ChaCha8Rng, f64)>,
    ) -> (TrajectoryStore, DVector<f64>) {
        let mut store = TrajectoryStore::new(dims);
        let mut x = x0.clone();
        let mut noise = y_noise;
        for (k, (uk, wk)) in u.iter().zip(w).enumerate() {
            x = &self.a * &x + &self.b_u * uk + &self.b_w * wk;
            let mut y = &self.c * &x;
            if let Some((r, std)) = noise.as_mut() {
                for v in y.iter_mut() {
                    *v += *std * gauss(r);
                }
            }
            store
                .push(k as i64, 0, uk.as_slice().to_vec(), y.as_slice().to_vec(), wk.as_slice().to_vec())
                .unwrap();
        }
        (store, x)
    }
}

/// Independent KKT residual of a primal-dual pair: the largest of the
/// stationarity, primal feasibility, dual feasibility and complementarity
/// violations.
pub fn kkt_residual(p: &QpProblem, x: &DVector<f64>, lam: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let mut stat = &p.p * x + &p.q;
    if lam.len() > 0 {
        stat += p.g.transpose() * lam;
    }
    if nu.len() > 0 {
        stat += p.a.transpose() * nu;
    }
    let mut worst = stat.amax();
    for i in 0..p.h.len() {
        let slack = p.h[i] - p.g.row(i).dot(&x.transpose());
        worst = worst.max((-slack).max(0.0)).max((-lam[i]).max(0.0)).max((lam[i] * slack).abs());
    }
    for i in 0..p.b.len() {
        worst = worst.max((p.a.row(i).dot(&x.transpose()) - p.b[i]).abs());
    }
    worst
}

/// Exact minimiser of a strictly convex QP by enumerating active sets: the
/// unique subset whose equality-constrained solution is primal feasible with
/// nonnegative multipliers. Exponential in the number of inequalities.
pub fn active_set_oracle(p: &QpProblem) -> Option<DVector<f64>> {
    let n = p.num_vars();
    let m = p.num_ineq();
    let pe = p.num_eq();
    assert!(m <= 16, "enumeration oracle is for small problems");
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = act.len() + pe;
        if k > n {
            continue;
        }
        let dim = n + k;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.p);
        rhs.rows_mut(0, n).copy_from(&(-&p.q));
        for (r, &i) in act.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = p.g[(i, c)];
                kkt[(c, n + r)] = p.g[(i, c)];
            }
            rhs[n + r] = p.h[i];
        }
        for e in 0..pe {
            let r = act.len() + e;
            for c in 0..n {
                kkt[(n + r, c)] = p.a[(e, c)];
                kkt[(c, n + r)] = p.a[(e, c)];
            }
            rhs[n + r] = p.b[e];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        let feasible = (0..m).all(|i| p.g.row(i).dot(&x.transpose()) <= p.h[i] + 1e-9);
        let dual_ok = (0..act.len()).all(|r| sol[n + r] >= -1e-9);
        if feasible && dual_ok {
            let f = p.objective(&x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
    }
    best.map(|(_, x)| x)
}

/// Random strictly convex QP with a nonempty interior: `n` variables, `m`
/// inequalities and `pe` equalities, all satisfied strictly by a hidden point.
pub fn random_qp(r: &mut ChaCha8Rng, n: usize, m: usize, pe: usize) -> QpProblem {
    let l = random_mat(r, n, n);
    let p = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let q = random_vec(r, n) * 3.0;
    let x0 = random_vec(r, n);
    let g = random_mat(r, m, n);
    let h = &g * &x0 + DVector::from_fn(m, |_, _| r.random_range(0.05..1.0));
    let a = random_mat(r, pe, n);
    let b = &a * &x0;
    QpProblem::new(p, q, g, h, a, b).unwrap()
}

/// Runs the scenario's backup controller from initial output `y0` (both
/// thermal nodes at `y0`), starting at weather step `start`, for `steps`
/// steps. Returns the last step index (relative to `start`) with a comfort
/// violation, if any.
pub fn backup_last_violation(
    cfg: &dad_dpc::harness::ScenarioConfig,
    y0: f64,
    start: usize,
    steps: usize,
) -> Option<usize> {
    use dad_dpc::harness::closed_loop::initial_plant;
    use dad_dpc::supervisor::violation_indicator;
    let (mut plant, mut backup, weather, schedule) = initial_plant(cfg).unwrap();
    plant.set_state(DVector::from_element(plant.model.n_x(), y0)).unwrap();
    let mut y = plant.output();
    let mut last = None;
    for k in 0..steps {
        let t = start + k;
        let u = backup.backup_policy(&y);
        y = plant.step(&u, &weather.realized(t).unwrap()).unwrap();
        let band = schedule.comfort_at(t as i64 + 1).unwrap();
        if violation_indicator(&y, band).unwrap() == 1 {
            last = Some(k);
        }
    }
    last
}
