use serde::{Deserialize, Serialize};

use crate::engine::simulate;
use crate::params::{PoolConfig, SimParams, Task};
use crate::SimError;

/// An observed mean response time for one pool configuration and workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub pools: PoolConfig,
    pub clients: u32,
    pub response_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Cap on full coordinate sweeps.
    pub max_sweeps: usize,
    /// Initial multiplicative step (0.2 means ×1.2 / ÷1.2).
    pub initial_step: f64,
    /// Search stops once the step shrinks below this.
    pub min_step: f64,
    /// Search stops once the loss drops below this.
    pub tolerance: f64,
    /// Service times are never pushed below this many seconds.
    pub min_service_time: f64,
    pub fit_gpu_efficiency: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 60,
            initial_step: 0.2,
            min_step: 2e-3,
            tolerance: 1e-6,
            min_service_time: 1e-3,
            fit_gpu_efficiency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub target: CalibrationTarget,
    pub simulated: f64,
    /// (simulated − target) / target.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: SimParams,
    pub residuals: Vec<Residual>,
    /// Sum of squared relative errors.
    pub loss: f64,
    pub sweeps: usize,
    /// False when the sweep cap was hit before the step or loss criterion.
    pub converged: bool,
}

impl Calibration {
    pub fn max_relative_error(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.relative_error.abs())
            .fold(0.0, f64::max)
    }
}

const GPU_EFFICIENCY_FLOOR: f64 = 0.05;

fn evaluate(params: &SimParams, targets: &[CalibrationTarget]) -> (f64, Vec<Residual>) {
    let mut loss = 0.0;
    let mut residuals = Vec::with_capacity(targets.len());
    for target in targets {
        let mut p = params.clone();
        p.clients = target.clients;
        let simulated = simulate(&target.pools, &p)
            .map(|r| r.response_time_mean)
            .unwrap_or(f64::NAN);
        let rel = if target.response_time != 0.0 {
            (simulated - target.response_time) / target.response_time.abs()
        } else {
            simulated
        };
        loss += if rel.is_finite() { rel * rel } else { f64::INFINITY };
        residuals.push(Residual {
            target: target.clone(),
            simulated,
            relative_error: rel,
        });
    }
    (loss, residuals)
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    /// All service times together.
    TimeScale,
    Service(Task),
    GpuEfficiency,
}

fn apply(params: &mut SimParams, coord: Coord, factor: f64, opts: &CalibrationOptions) -> bool {
    match coord {
        Coord::TimeScale => {
            let mut changed = false;
            for task in Task::ALL {
                let old = params.service_times.get(task);
                let new = (old * factor).max(opts.min_service_time);
                params.service_times.set(task, new);
                changed |= new != old;
            }
            changed
        }
        Coord::Service(task) => {
            let old = params.service_times.get(task);
            let new = (old * factor).max(opts.min_service_time);
            params.service_times.set(task, new);
            new != old
        }
        Coord::GpuEfficiency => {
            let old = params.gpu_efficiency;
            let new = (old * factor).clamp(GPU_EFFICIENCY_FLOOR, 1.0);
            params.gpu_efficiency = new;
            new != old
        }
    }
}

struct Descent {
    params: SimParams,
    loss: f64,
    residuals: Vec<Residual>,
    sweeps: usize,
}

impl Descent {
    /// Coordinate descent over `coords`; returns false if the sweep cap was hit.
    fn run(&mut self, coords: &[Coord], targets: &[CalibrationTarget], opts: &CalibrationOptions) -> bool {
        let mut step = opts.initial_step;
        while self.loss > opts.tolerance {
            if self.sweeps >= opts.max_sweeps {
                return false;
            }
            self.sweeps += 1;
            let mut improved = false;
            for &coord in coords {
                for factor in [1.0 + step, 1.0 / (1.0 + step)] {
                    let mut trial = self.params.clone();
                    if !apply(&mut trial, coord, factor, opts) {
                        continue;
                    }
                    let (loss, residuals) = evaluate(&trial, targets);
                    if loss < self.loss {
                        self.params = trial;
                        self.loss = loss;
                        self.residuals = residuals;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step /= 2.0;
                if step < opts.min_step {
                    break;
                }
            }
        }
        true
    }
}

/// Fits base service times (and optionally GPU efficiency) so that simulated
/// mean response times match `targets`, by multiplicative coordinate descent
/// on the sum of squared relative errors starting from `start`. The first
/// coordinate scales every service time at once, so a start point with the
/// right shape is moved along that shape before individual times are touched.
///
/// Targets that no positive parameters can reach drive the affected times to
/// `min_service_time`; the remaining error is reported in `residuals`.
pub fn calibrate(
    targets: &[CalibrationTarget],
    start: &SimParams,
    opts: &CalibrationOptions,
) -> Result<Calibration, SimError> {
    if targets.is_empty() {
        return Err(SimError::NoTargets);
    }
    start.validate()?;
    for t in targets {
        t.pools.validate()?;
    }
    let mut coords: Vec<Coord> = Task::ALL.iter().map(|&t| Coord::Service(t)).collect();
    if opts.fit_gpu_efficiency {
        coords.push(Coord::GpuEfficiency);
    }

    let mut params = start.clone();
    for task in Task::ALL {
        let t = params.service_times.get(task).max(opts.min_service_time);
        params.service_times.set(task, t);
    }
    let (loss, residuals) = evaluate(&params, targets);
    let mut state = Descent {
        params,
        loss,
        residuals,
        sweeps: 0,
    };
    // Shape-preserving fit first, then per-parameter refinement.
    let scale_done = state.run(&[Coord::TimeScale], targets, opts);
    let converged = scale_done && state.run(&coords, targets, opts);
    let Descent {
        params,
        residuals,
        loss,
        sweeps,
    } = state;

    Ok(Calibration {
        params,
        residuals,
        loss,
        sweeps,
        converged,
    })
}
