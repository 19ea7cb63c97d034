//! The optimization cycle: a coordinator that owns the optimizer and N worker
//! slots that evaluate trials concurrently.
//!
//! Each trial goes through `prepare` (its directory under `trials/<id>/` and a
//! configuration snapshot), `launch` (evaluation on a worker) and `finalize`
//! (metrics, surrogate checkpoint, cumulative ledger and log).

mod artifacts;
mod cycle;
mod evaluator;
mod spec;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::SystemTime;

use thiserror::Error;

use crate::problem::Configuration;
use crate::search::Phase;
use crate::seed::{derive, stream};

pub use artifacts::{
    finalize, prepare, trial_dir, Finalization, CHECKPOINT_FILE, CONFIG_FILE, LEDGER_FILE, LOG_FILE, METRICS_FILE,
};
pub use cycle::{evaluate_all, max_concurrency, run_cycle, run_cycle_with, RunOptions, RunOutcome, SlotEvent};
pub(crate) use evaluator::read_metrics;
pub use evaluator::{
    aggregate, evaluator_for, format_metrics, format_value, parse_metrics, CommandEvaluator, Evaluation, Evaluator,
    FnEvaluator, Job, SimulatorEvaluator, POOL_VARIABLES,
};
pub use spec::{CommandSpec, ExecutorKind, ExecutorSpec};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("trial directory {0} already holds a different configuration")]
    Collision(String),
    #[error("run directory {0} is not empty")]
    RunDirInUse(String),
    #[error("{0}")]
    State(String),
    #[error(transparent)]
    Search(#[from] crate::search::SearchError),
    #[error(transparent)]
    Archive(#[from] crate::archive::ArchiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Pending,
    Running,
    Done,
    Failed,
}

/// One configuration evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: u64,
    pub config: Configuration,
    pub phase: Phase,
    pub status: TrialStatus,
    pub metrics: BTreeMap<String, f64>,
    /// One seed per repeat.
    pub seeds: Vec<u64>,
    pub dir: PathBuf,
    pub started: Option<SystemTime>,
    pub finished: Option<SystemTime>,
    pub diagnostics: Option<String>,
}

impl Trial {
    pub fn new(id: u64, config: Configuration, phase: Phase, seeds: Vec<u64>, dir: PathBuf) -> Self {
        Self {
            id,
            config,
            phase,
            status: TrialStatus::Pending,
            metrics: BTreeMap::new(),
            seeds,
            dir,
            started: None,
            finished: None,
            diagnostics: None,
        }
    }

    pub fn start(&mut self) -> Result<(), RunError> {
        if self.status != TrialStatus::Pending {
            return Err(RunError::State(format!(
                "trial {} started while {:?}",
                self.id, self.status
            )));
        }
        self.status = TrialStatus::Running;
        self.started = Some(SystemTime::now());
        Ok(())
    }

    /// Running to done or failed. A success without the objective metric is
    /// a failure.
    pub fn complete(&mut self, result: Result<BTreeMap<String, f64>, String>, objective: &str) -> Result<(), RunError> {
        if self.status != TrialStatus::Running {
            return Err(RunError::State(format!(
                "trial {} completed while {:?}",
                self.id, self.status
            )));
        }
        self.finished = Some(SystemTime::now());
        match result {
            Ok(m) if m.contains_key(objective) => {
                self.metrics = m;
                self.status = TrialStatus::Done;
            }
            Ok(m) => {
                self.metrics = m;
                self.status = TrialStatus::Failed;
                self.diagnostics = Some(format!("objective metric `{objective}` missing"));
            }
            Err(e) => {
                self.status = TrialStatus::Failed;
                self.diagnostics = Some(e);
            }
        }
        Ok(())
    }

    /// Marks a completed trial as failed after the fact, e.g. on a violated
    /// constraint.
    pub fn reject(&mut self, reason: String) {
        self.status = TrialStatus::Failed;
        self.diagnostics.get_or_insert(reason);
    }
}

/// Seeds of the repeats of trial `id`.
pub fn trial_seeds(run_seed: u64, id: u64, repeats: usize) -> Vec<u64> {
    (0..repeats as u64)
        .map(|r| derive(&[run_seed, stream::TRIAL, id, r]))
        .collect()
}

/// Seeds of the repeats of the reference evaluation.
pub fn reference_seeds(run_seed: u64, repeats: usize) -> Vec<u64> {
    (0..repeats as u64)
        .map(|r| derive(&[run_seed, stream::REFERENCE, r]))
        .collect()
}
