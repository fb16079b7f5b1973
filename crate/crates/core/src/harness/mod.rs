//! Closed-loop orchestration: scenario configs, offline data collection,
//! online runs, sweeps, Monte Carlo and certificate checks.

pub mod closed_loop;
pub mod config;
pub mod kpi;
pub mod output;
pub mod sweep;
pub mod verify;

use thiserror::Error;

pub use closed_loop::{collect_offline, run_closed_loop, simulate, Mode, OfflineData, RunMeta, RunOutput};
pub use config::ScenarioConfig;
pub use kpi::{compute_kpis, KpiReport};
pub use sweep::{monte_carlo, sweep_alpha, MonteCarloReport, SweepRow};
pub use verify::{verify_certificates, CertificateReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Plant(#[from] crate::plant::PlantError),
    #[error(transparent)]
    Traj(#[from] crate::trajdata::TrajError),
    #[error(transparent)]
    Predictor(#[from] crate::predictor::PredictorError),
    #[error(transparent)]
    Conformal(#[from] crate::conformal::ConformalError),
    #[error(transparent)]
    Supervisor(#[from] crate::supervisor::SupervisorError),
    #[error("malformed log: {0}")]
    MalformedLog(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: i64,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    pub(crate) fn at(step: i64) -> impl FnOnce(HarnessError) -> HarnessError {
        move |e| HarnessError::AtStep {
            step,
            source: Box::new(e),
        }
    }
}
