//! Discrete-event model of an image identification engine built from four
//! thread pools (HTTP, download, extract, simsearch) on a shared CPU and one GPU.
//!
//! Clients form a closed loop: each one issues a request, waits for its
//! response and immediately issues the next. [`simulate`] returns the user
//! response time together with per-task times, pool busy fractions and
//! resource usage; [`calibrate`] fits service times against observed response
//! times.

mod calibrate;
mod engine;
mod params;
mod report;

pub use calibrate::{calibrate, Calibration, CalibrationOptions, CalibrationTarget, Residual};
pub use engine::simulate;
pub use params::{default_cpu_weights, PerTask, PoolConfig, SimParams, Task};
pub use report::{MetricsReport, PoolBusy, Sample, TaskTimes};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("pool `{0}` must hold at least one token")]
    InvalidPool(&'static str),
    #[error("invalid simulator parameter: {0}")]
    InvalidParam(&'static str),
    #[error("calibration needs at least one target")]
    NoTargets,
}
