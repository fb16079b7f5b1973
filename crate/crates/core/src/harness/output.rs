//! Run artefacts: step log, metadata sidecar, diagnostics and KPI summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::closed_loop::{RunMeta, RunOutput};
use super::HarnessError;
use crate::supervisor::{read_step_log, write_step_log, StepRecord};

pub const LOG_FILE: &str = "log.csv";

/// `dir/log.csv` → `dir/log.meta.json`.
pub fn meta_path(log: &Path) -> PathBuf {
    log.with_extension("meta.json")
}

/// Writes `log.csv`, `log.meta.json`, `diagnostics.jsonl`, `incidents.csv`
/// and `kpi.json` under `dir`. Everything except the diagnostics (which hold
/// wall-clock solve times) is deterministic in the configuration and seed.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(dir)?;
    let log = dir.join(LOG_FILE);
    write_step_log(&out.records, BufWriter::new(File::create(&log)?))?;
    fs::write(meta_path(&log), serde_json::to_string_pretty(&out.meta)?)?;
    let mut diag = BufWriter::new(File::create(dir.join("diagnostics.jsonl"))?);
    for d in &out.diagnostics {
        serde_json::to_writer(&mut diag, d)?;
        diag.write_all(b"\n")?;
    }
    diag.flush()?;
    let mut inc = csv::Writer::from_path(dir.join("incidents.csv"))?;
    inc.write_record(["t", "message"])?;
    for (t, msg) in &out.incidents {
        inc.write_record([t.to_string(), msg.clone()])?;
    }
    inc.flush()?;
    fs::write(dir.join("kpi.json"), serde_json::to_string_pretty(&out.kpi)?)?;
    Ok(log)
}

pub fn read_log(path: &Path) -> Result<(Vec<StepRecord>, RunMeta), HarnessError> {
    let records = read_step_log(File::open(path)?).map_err(HarnessError::MalformedLog)?;
    let meta_file = meta_path(path);
    let meta: RunMeta = serde_json::from_str(&fs::read_to_string(&meta_file).map_err(|e| {
        HarnessError::MalformedLog(format!("missing metadata sidecar {}: {e}", meta_file.display()))
    })?)?;
    Ok((records, meta))
}
