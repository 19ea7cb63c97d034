use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::problem::SearchSpace;
use crate::search::Phase;

use super::evaluator::format_metrics;
use super::{RunError, Trial, TrialStatus};

pub const CONFIG_FILE: &str = "config";
pub const METRICS_FILE: &str = "metrics";
pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const LEDGER_FILE: &str = "ledger";
pub const LOG_FILE: &str = "log";

pub fn trial_dir(run_dir: &Path, id: u64) -> PathBuf {
    run_dir.join("trials").join(id.to_string())
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    id: u64,
    phase: Phase,
    configuration: std::collections::BTreeMap<String, f64>,
    values: &'a [f64],
    seeds: &'a [u64],
}

fn write(path: &Path, contents: &str) -> Result<(), RunError> {
    std::fs::write(path, contents).map_err(|e| RunError::Io(path.display().to_string(), e))
}

/// Creates the trial directory with its configuration snapshot. Calling it
/// again for the same trial does nothing; a different trial with the same id
/// is a collision.
pub fn prepare(trial: &Trial, space: &SearchSpace) -> Result<PathBuf, RunError> {
    let snapshot = ConfigSnapshot {
        id: trial.id,
        phase: trial.phase,
        configuration: space.named(&trial.config),
        values: trial.config.values(),
        seeds: &trial.seeds,
    };
    let mut text = serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
    text.push('\n');
    let path = trial.dir.join(CONFIG_FILE);
    if path.exists() {
        let existing = std::fs::read_to_string(&path).map_err(|e| RunError::Io(path.display().to_string(), e))?;
        return if existing == text {
            Ok(trial.dir.clone())
        } else {
            Err(RunError::Collision(trial.dir.display().to_string()))
        };
    }
    std::fs::create_dir_all(&trial.dir).map_err(|e| RunError::Io(trial.dir.display().to_string(), e))?;
    write(&path, &text)?;
    Ok(trial.dir.clone())
}

/// What the coordinator knows about a trial once it has been told.
pub struct Finalization<'a> {
    pub loss: f64,
    pub checkpoint: Option<&'a str>,
    pub ledger: &'a str,
    pub evaluator_log: &'a str,
}

/// Writes metrics, checkpoint, cumulative ledger and log.
pub fn finalize(trial: &Trial, f: &Finalization<'_>) -> Result<(), RunError> {
    if !matches!(trial.status, TrialStatus::Done | TrialStatus::Failed) {
        return Err(RunError::State(format!(
            "trial {} finalized while {:?}",
            trial.id, trial.status
        )));
    }
    write(&trial.dir.join(METRICS_FILE), &format_metrics(&trial.metrics))?;
    if let Some(cp) = f.checkpoint {
        write(&trial.dir.join(CHECKPOINT_FILE), cp)?;
    }
    write(&trial.dir.join(LEDGER_FILE), f.ledger)?;
    let mut log = String::new();
    let _ = writeln!(log, "trial {}", trial.id);
    let _ = writeln!(log, "status: {:?}", trial.status);
    let _ = writeln!(log, "configuration: {}", trial.config);
    let _ = writeln!(log, "seeds: {:?}", trial.seeds);
    if let (Some(s), Some(e)) = (trial.started, trial.finished) {
        let _ = writeln!(log, "started: {:.3}", unix(s));
        let _ = writeln!(log, "finished: {:.3}", unix(e));
        let _ = writeln!(log, "elapsed: {:.3} s", unix(e) - unix(s));
    }
    let _ = writeln!(log, "loss used: {:?}", f.loss);
    if let Some(d) = &trial.diagnostics {
        let _ = writeln!(log, "diagnostics: {d}");
    }
    if !f.evaluator_log.is_empty() {
        let _ = writeln!(log, "--- evaluator output ---\n{}", f.evaluator_log.trim_end());
    }
    write(&trial.dir.join(LOG_FILE), &log)
}

fn unix(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}
