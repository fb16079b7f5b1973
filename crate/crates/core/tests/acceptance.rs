//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL` line. The closed-loop grid (three violation
//! levels × five seeds plus baselines) is computed once and shared.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;

use dad_dpc::conformal::QuantileTable;
use dad_dpc::harness::sweep::{run_grid, summarize, GridRun};
use dad_dpc::harness::verify::CheckStatus;
use dad_dpc::harness::{simulate, verify_certificates, Mode, RunOutput, ScenarioConfig};
use dad_dpc::plant::ColdSnap;
use dad_dpc::predictor::{assemble, solve_inner_direct, QgWeight};
use dad_dpc::qpsolve::{self, QpSettings, QpStatus};
use dad_dpc::rbdpc::{build_ocp, OcpSetup};
use dad_dpc::supervisor::{PolicyKind, StepRecord};
use dad_dpc::trajdata::{build_mosaic, Dims};

use common::*;

const GRID_ALPHAS: [f64; 3] = [0.0125, 0.05, 0.2];
const GRID_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

/// Grid runs and the wall time spent per violation level.
fn grid() -> &'static (Vec<GridRun>, f64) {
    static GRID: OnceLock<(Vec<GridRun>, f64)> = OnceLock::new();
    GRID.get_or_init(|| {
        let start = Instant::now();
        let runs = run_grid(&ScenarioConfig::default(), &GRID_ALPHAS, &GRID_SEEDS).expect("grid runs");
        let per_alpha = start.elapsed().as_secs_f64() / GRID_ALPHAS.len() as f64;
        (runs, per_alpha)
    })
}

fn cold_snap_run() -> &'static RunOutput {
    static RUN: OnceLock<RunOutput> = OnceLock::new();
    RUN.get_or_init(|| simulate(&cold_snap_config(), Mode::Dad, false).expect("cold-snap run"))
}

fn parity_run() -> &'static RunOutput {
    static RUN: OnceLock<RunOutput> = OnceLock::new();
    RUN.get_or_init(|| simulate(&ScenarioConfig::default(), Mode::Dad, true).expect("paired run"))
}

/// Default scenario with an unforecast three-day cold snap of 8 K starting two
/// days into the online phase.
fn cold_snap_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.weather.cold_snap = Some(ColdSnap {
        start_step: cfg.collection_len() + 192,
        duration_steps: 288,
        depth_c: 8.0,
        forecast_sees: false,
    });
    cfg
}

/// Running average violation over `t = 1..`, paired with the running minimum
/// and maximum of `α_t` (including `α_0`).
fn running(records: &[StepRecord], alpha_0: f64) -> Vec<(f64, f64, f64)> {
    let (mut sum, mut lo, mut hi) = (0.0, alpha_0, alpha_0);
    records
        .iter()
        .skip(1)
        .map(|r| {
            sum += r.v as f64;
            lo = lo.min(r.alpha);
            hi = hi.max(r.alpha);
            (sum / r.t as f64, lo, hi)
        })
        .collect()
}

#[test]
fn criterion_1_predictor_exactness() {
    let start = Instant::now();
    let dims = Dims::new(1, 1, 1);
    let (t_init, horizon) = (4, 20);
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n_x = r.random_range(1..=4);
        let sys = random_lti(&mut r, n_x, dims);
        let len = 300;
        let u: Vec<_> = (0..len).map(|_| random_vec(&mut r, 1)).collect();
        let w: Vec<_> = (0..len).map(|_| random_vec(&mut r, 1)).collect();
        let x0 = random_vec(&mut r, n_x);
        let (data, _) = sys.record(dims, &x0, &u, &w, None);
        let bundle = build_mosaic(&data, t_init, horizon).unwrap();
        let pred = assemble(&bundle, &QgWeight::Scalar(0.0), t_init, horizon).unwrap();
        for _ in 0..5 {
            let n = t_init + horizon;
            let u: Vec<_> = (0..n).map(|_| random_vec(&mut r, 1)).collect();
            let w: Vec<_> = (0..n).map(|_| random_vec(&mut r, 1)).collect();
            let (traj, _) = sys.record(dims, &random_vec(&mut r, n_x), &u, &w, None);
            let z = traj.z_vector(0..t_init);
            let up = traj.stacked(t_init..n, dad_dpc::trajdata::Signal::U);
            let wp = traj.stacked(t_init..n, dad_dpc::trajdata::Signal::W);
            let y = traj.stacked(t_init..n, dad_dpc::trajdata::Signal::Y);
            let yhat = pred.predict(&z, &up, &wp).unwrap();
            worst = worst.max((y - yhat).amax());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst <= 1e-6 && secs < 5.0,
        &format!("max {horizon}-step error {worst:.2e} over 20 systems, {secs:.2} s"),
    );
}

#[test]
fn criterion_2_bilevel_equivalence() {
    let start = Instant::now();
    let dims = Dims::new(1, 1, 2);
    let (t_init, horizon) = (3, 8);
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let n_x = r.random_range(1..=4);
        let sys = random_lti(&mut r, n_x, dims);
        let len = 120;
        let u: Vec<_> = (0..len).map(|_| random_vec(&mut r, 1)).collect();
        let w: Vec<_> = (0..len).map(|_| random_vec(&mut r, 2)).collect();
        let x0 = random_vec(&mut r, n_x);
        let mut noise_rng = rng(1000 + k);
        let noise = (k % 2 == 1).then_some((&mut noise_rng, 0.1));
        let (data, _) = sys.record(dims, &x0, &u, &w, noise);
        let bundle = build_mosaic(&data, t_init, horizon).unwrap();
        let q = QgWeight::Scalar(10f64.powf(r.random_range(-3.0..1.0)));
        let pred = assemble(&bundle, &q, t_init, horizon).unwrap();
        let z = random_vec(&mut r, pred.z_len());
        let up = random_vec(&mut r, horizon);
        let wp = random_vec(&mut r, 2 * horizon);
        let fast = pred.predict(&z, &up, &wp).unwrap();
        let direct = solve_inner_direct(&bundle, &q, &z, &up, &wp).unwrap();
        worst = worst.max((fast - direct.y_pred).amax());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        worst <= 1e-8 && secs < 10.0,
        &format!("max deviation {worst:.2e} over 50 bundles, {secs:.2} s"),
    );
}

#[test]
fn criterion_3_qp_solver() {
    let start = Instant::now();
    let mut r = rng(3);
    let (mut err, mut kkt) = (0.0f64, 0.0f64);
    let mut all_optimal = true;
    for k in 0..200 {
        let n = r.random_range(2..=6);
        let m = r.random_range(1..=10);
        let pe = if k % 4 == 0 { r.random_range(1..n) } else { 0 };
        let prob = random_qp(&mut r, n, m, pe);
        let sol = qpsolve::solve(&prob, &QpSettings::default()).unwrap();
        all_optimal &= sol.status == QpStatus::Optimal;
        let oracle = active_set_oracle(&prob).expect("oracle finds the minimiser");
        err = err.max((&sol.x - oracle).amax());
        kkt = kkt.max(kkt_residual(&prob, &sol.x, &sol.lambda_ineq, &sol.nu_eq));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        all_optimal && err <= 1e-5 && kkt <= 1e-6 && secs < 30.0,
        &format!("max |x − oracle| {err:.2e}, max KKT residual {kkt:.2e}, {secs:.2} s"),
    );
}

#[test]
fn criterion_4_conformal_coverage() {
    let start = Instant::now();
    let mut r = rng(4);
    let draw = |r: &mut rand_chacha::ChaCha8Rng| gauss(r).abs() * 0.7 + 0.05 * r.random::<f64>();
    let mut table = QuantileTable::new(1, 1, 500, 500);
    for _ in 0..500 {
        table.push_residual(0, 0, draw(&mut r)).unwrap();
    }
    let fresh: Vec<f64> = (0..10_000).map(|_| draw(&mut r)).collect();
    let mut ok = true;
    let mut detail = String::new();
    for sigma in [0.05, 0.2] {
        let hw = table.half_width(0, 0, sigma).unwrap();
        let cover = fresh.iter().filter(|v| **v <= hw).count() as f64 / fresh.len() as f64;
        ok &= cover >= 1.0 - sigma - 0.02 && cover <= 1.0 - sigma + 0.03;
        detail += &format!("σ={sigma}: coverage {cover:.4}; ");
    }
    let grid: Vec<f64> = (0..=10).map(|k| table.half_width(0, 0, k as f64 / 10.0).unwrap()).collect();
    let monotone = grid.windows(2).all(|p| p[1] <= p[0]);
    let secs = start.elapsed().as_secs_f64();
    report(4, ok && monotone && secs < 5.0, &format!("{detail}monotone {monotone}, {secs:.2} s"));
}

#[test]
fn criterion_5_average_violation_identity() {
    let mut runs: Vec<&RunOutput> = grid().0.iter().map(|g| &g.output).collect();
    runs.push(cold_snap_run());
    runs.push(parity_run());
    let mut bad = Vec::new();
    for (k, out) in runs.iter().enumerate() {
        let m = &out.meta;
        let rep = verify_certificates(&out.records, m).unwrap();
        // independent replay of the two-sided bound
        let mut first = None;
        for ((avg, lo, hi), rec) in running(&out.records, m.alpha_0).into_iter().zip(out.records.iter().skip(1)) {
            let tn = rec.t as f64 * m.eta;
            let tol = 1e-12 * (1.0 + rec.t as f64);
            let lower = m.alpha + (m.alpha_0 - hi) / tn;
            let upper = m.alpha + (m.alpha_0 - lo) / tn;
            if first.is_none() && !(avg >= lower - tol && avg <= upper + tol) {
                first = Some(rec.t);
            }
        }
        if first.is_some() || rep.check("average_identity").unwrap().status != CheckStatus::Pass {
            bad.push((k, first));
        }
    }
    report(5, bad.is_empty(), &format!("{} runs checked, failures {bad:?}", runs.len()));
}

#[test]
fn criterion_6_violation_level() {
    let (runs, per_alpha) = grid();
    let mut ok = *per_alpha < 180.0;
    let mut detail = String::new();
    for alpha in [0.05, 0.2] {
        let mut finals: Vec<f64> = runs.iter().filter(|g| g.alpha == alpha).map(|g| g.output.kpi.violation_ratio).collect();
        finals.sort_by(f64::total_cmp);
        let median = finals[finals.len() / 2];
        let mut pointwise = true;
        for g in runs.iter().filter(|g| g.alpha == alpha) {
            let m = &g.output.meta;
            for ((avg, lo, _), rec) in running(&g.output.records, m.alpha_0).into_iter().zip(g.output.records.iter().skip(1)) {
                let upper = m.alpha + (m.alpha_0 - lo) / (rec.t as f64 * m.eta);
                pointwise &= avg <= upper + 1e-12 * (1.0 + rec.t as f64);
            }
        }
        ok &= median >= alpha - 0.02 && median <= alpha + 0.01 && pointwise;
        detail += &format!("α={alpha}: median {median:.4} of {finals:.4?}, pointwise bound {pointwise}; ");
    }
    report(6, ok, &format!("{detail}{per_alpha:.0} s per α"));
}

#[test]
fn criterion_7_trade_off_trend() {
    let rows = summarize(&grid().0, &GRID_ALPHAS);
    let energy: Vec<f64> = rows.iter().map(|r| r.energy_kwh).collect();
    let ratio: Vec<f64> = rows.iter().map(|r| r.violation_ratio).collect();
    let mag: Vec<f64> = rows.iter().map(|r| r.violation_magnitude_kh).collect();
    let energy_ok = energy.windows(2).all(|p| p[1] <= p[0] * 1.01);
    let ratio_ok = ratio.windows(2).all(|p| p[1] > p[0]);
    let mag_ok = mag.windows(2).all(|p| p[1] > p[0]);
    let rel: Vec<String> = rows
        .iter()
        .map(|r| r.relative_energy_pct.map_or("-".into(), |v| format!("{v:.1}%")))
        .collect();
    report(
        7,
        energy_ok && ratio_ok && mag_ok,
        &format!("energy {energy:.1?} kWh ({rel:?}), violation ratio {ratio:.4?}, magnitude {mag:.2?} Kh"),
    );
}

#[test]
fn criterion_8_recovery_certificate() {
    let cfg = cold_snap_config();
    let db = cfg.backup.delta_bar;
    // the contract: from anywhere in the operating range the backup clears
    // violations within Δ̄ steps and keeps them cleared
    let (lo, hi) = (cfg.backup.y_lim_lower[0], cfg.backup.y_lim_upper[0]);
    let mut contract_ok = true;
    for start in (0..672).step_by(97) {
        for i in 0..=15 {
            let y0 = lo + (hi - lo) * i as f64 / 15.0;
            if let Some(k) = backup_last_violation(&ScenarioConfig::default(), y0, start, db + 672) {
                contract_ok &= k < db;
            }
        }
    }
    let out = cold_snap_run();
    let m = &out.meta;
    let bound = -m.eta * (1.0 - m.alpha) * (db as f64 + 1.0);
    let min_alpha = out.records.iter().map(|r| r.alpha).fold(f64::INFINITY, f64::min);
    let mut longest = 0usize;
    let mut run = 0usize;
    for r in &out.records {
        run = if r.policy == PolicyKind::Backup { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    let rep = verify_certificates(&out.records, m).unwrap();
    let verified = rep.check("recovery_bound").unwrap().status == CheckStatus::Pass
        && rep.check("backup_intervals").unwrap().status == CheckStatus::Pass;
    let violations: u32 = out.records.iter().skip(1).map(|r| r.v as u32).sum();
    report(
        8,
        contract_ok && min_alpha >= bound && longest < 2 * db && verified,
        &format!(
            "contract {contract_ok}, min α_t {min_alpha:.3} ≥ {bound:.3}, longest backup run {longest} < {}, {violations} violations under the cold snap",
            2 * db
        ),
    );
}

#[test]
fn criterion_9_complexity_parity() {
    let cfg = ScenarioConfig::default();
    let c = &cfg.controller;
    let off = dad_dpc::harness::collect_offline(&cfg).unwrap();
    let setup = OcpSetup {
        predictor: &off.predictor,
        table: &off.table,
        schedule: &off.schedule,
        cost: &c.cost(),
        inputs: &dad_dpc::rbdpc::InputSet {
            u_min: off.plant.model.u_min.clone(),
            u_max: off.plant.model.u_max.clone(),
        },
    };
    let z = DVector::from_element(off.predictor.z_len(), 20.0);
    let w = DVector::zeros(2 * c.horizon);
    let mut structural = true;
    let nominal = build_ocp(&setup, 1.0, 1000, &z, &w).unwrap();
    // σ = 0 is routed to the backup and never reaches the OCP
    let levels = std::iter::once(1e-3).chain((1..=20).map(|k| k as f64 / 20.0));
    for sigma in levels {
        let ocp = build_ocp(&setup, sigma, 1000, &z, &w).unwrap();
        structural &= ocp.qp.num_vars() == nominal.qp.num_vars()
            && ocp.qp.num_ineq() == nominal.qp.num_ineq()
            && ocp.qp.num_eq() == nominal.qp.num_eq();
    }
    let times = &parity_run().paired_times;
    let mean = |f: fn(&(f64, f64)) -> f64| times.iter().map(f).sum::<f64>() / times.len() as f64;
    let (robust, nom) = (mean(|p| p.0), mean(|p| p.1));
    let ratio = robust / nom;
    report(
        9,
        structural && !times.is_empty() && (0.8..=1.2).contains(&ratio),
        &format!(
            "identical sizes {structural} ({} vars, {} rows), mean solve {:.2} ms robust vs {:.2} ms nominal over {} steps, ratio {ratio:.3}",
            nominal.qp.num_vars(),
            nominal.qp.num_ineq(),
            robust * 1e3,
            nom * 1e3,
            times.len()
        ),
    );
}

#[test]
fn criterion_10_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("scenario.toml");
    std::fs::write(&cfg_path, ScenarioConfig::default().to_toml_string().unwrap()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_dad-dpc"))
            .args(["simulate", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .args(["--seed", "7"])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(out.join("log.csv")).unwrap()
    };
    let (a, b) = (run("first"), run("second"));
    report(10, !a.is_empty() && a == b, &format!("two logs of {} bytes, identical {}", a.len(), a == b));
}
