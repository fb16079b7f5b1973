//! The default backup controller on the default plant: comfort envelope and
//! recovery from anywhere in the operating range.

mod common;

use dad_dpc::harness::closed_loop::initial_plant;
use dad_dpc::harness::ScenarioConfig;

use common::backup_last_violation;

/// Steps the backup needs to clear violations (the `Δ̄` of the contract).
const RECOVERY: usize = 96;
/// Steps after recovery over which violations must stay absent.
const HOLD: usize = 672;

#[test]
fn backup_recovers_from_the_whole_operating_range() {
    let cfg = ScenarioConfig::default();
    let lo = cfg.backup.y_lim_lower[0];
    let hi = cfg.backup.y_lim_upper[0];
    let mut worst = 0;
    for seed in 0..3u64 {
        let mut cfg = cfg.clone();
        cfg.run.seed = seed;
        for start in (0..672).step_by(97) {
            for i in 0..=30 {
                let y0 = lo + (hi - lo) * i as f64 / 30.0;
                if let Some(k) = backup_last_violation(&cfg, y0, start, RECOVERY + HOLD) {
                    assert!(k < RECOVERY, "y0={y0} start={start} seed={seed}: violation at +{k}");
                    worst = worst.max(k + 1);
                }
            }
        }
    }
    println!("longest recovery {worst} steps");
}

#[test]
fn backup_envelope_on_default_scenario() {
    let cfg = ScenarioConfig::default();
    let (mut plant, mut backup, weather, _) = initial_plant(&cfg).unwrap();
    let mut y = plant.output();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..1344 {
        let u = backup.backup_policy(&y);
        y = plant.step(&u, &weather.realized(t).unwrap()).unwrap();
        lo = lo.min(y[0]);
        hi = hi.max(y[0]);
    }
    println!("envelope [{lo:.3}, {hi:.3}]");
    assert!(lo >= 20.5 && hi <= 24.0, "envelope [{lo}, {hi}]");
}
