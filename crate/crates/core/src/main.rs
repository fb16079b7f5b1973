use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use dad_dpc::harness::output::{read_log, write_run};
use dad_dpc::harness::sweep::write_sweep_csv;
use dad_dpc::harness::{collect_offline, monte_carlo, run_closed_loop, sweep_alpha, verify_certificates, HarnessError, ScenarioConfig};

#[derive(Parser)]
#[command(name = "dad-dpc", version, about = "Violation-rate supervised data-driven predictive control")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-loop run with paired baseline; writes log, metadata, diagnostics and KPIs.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Offline phase only: collected data, predictor and residual table.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trade-off table over target violation levels.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Seed-replicated KPIs (JSON on stdout).
    Montecarlo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: usize,
    },
    /// Re-checks the violation certificates of a step log.
    Verify {
        #[arg(long)]
        log: PathBuf,
    },
}

fn load(config: Option<&Path>) -> Result<ScenarioConfig, HarnessError> {
    match config {
        Some(p) => ScenarioConfig::from_file(p),
        None => Ok(ScenarioConfig::default()),
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.cmd {
        Cmd::Simulate { config, out, seed } => {
            let mut cfg = load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let res = run_closed_loop(&cfg)?;
            let log = write_run(&out, &res)?;
            fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            info!("wrote {}", log.display());
            println!("{}", serde_json::to_string_pretty(&res.kpi)?);
        }
        Cmd::Calibrate { config, out } => {
            let cfg = load(config.as_deref())?;
            let off = collect_offline(&cfg)?;
            fs::create_dir_all(&out)?;
            off.hankel_store.write_csv(BufWriter::new(File::create(out.join("hankel_data.csv"))?))?;
            off.calib_store.write_csv(BufWriter::new(File::create(out.join("calibration_data.csv"))?))?;
            off.predictor.write_binary(BufWriter::new(File::create(out.join("predictor.bin"))?))?;
            off.table.write_csv(BufWriter::new(File::create(out.join("residuals.csv"))?))?;
            let levels = [0.05, 0.1, 0.2, 0.5];
            let last = cfg.controller.horizon - 1;
            let hw = |i: usize| levels.map(|s| off.table.half_width(i, 0, s).unwrap_or(f64::NAN));
            let summary = serde_json::json!({
                "hankel_columns": off.bundle.column_count(),
                "n_cal": off.table.n_cal,
                "persistently_exciting": off.pe.exciting,
                "input_rank": off.pe.rank,
                "input_rows": off.pe.rows,
                "sigma_levels": levels,
                "half_widths_first_step": hw(0),
                "half_widths_last_step": hw(last),
            });
            fs::write(out.join("calibration.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Sweep {
            config,
            alphas,
            out,
            seeds,
        } => {
            let cfg = load(config.as_deref())?;
            let rows = sweep_alpha(&cfg, &alphas, seeds)?;
            fs::create_dir_all(&out)?;
            write_sweep_csv(&rows, File::create(out.join("sweep.csv"))?)?;
            write_sweep_csv(&rows, std::io::stdout())?;
        }
        Cmd::Montecarlo { config, seeds } => {
            let cfg = load(config.as_deref())?;
            let rep = monte_carlo(&cfg, seeds)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        Cmd::Verify { log } => {
            let (records, meta) = read_log(&log)?;
            let rep = verify_certificates(&records, &meta)?;
            for c in &rep.checks {
                println!("{:<17} {:?} {}", c.name, c.status, c.detail);
            }
            if !rep.all_passed() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
