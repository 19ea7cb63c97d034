//! Built-in scenarios, selectable by name from the command line.

use serde::{Deserialize, Serialize};

use crate::document::{parse_document, Diagnostic, ProblemDocument};
use crate::sim::{CalibrationTarget, PerTask};

const PLANTNET: &str = include_str!("../scenarios/plantnet.json");
const PLANTNET_CALIBRATION: &str = include_str!("../scenarios/plantnet.calibration.json");

pub const NAMES: [&str; 1] = ["plantnet"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTimes {
    pub service_times: PerTask,
    pub gpu_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResidual {
    pub clients: u32,
    pub target: f64,
    pub simulated: f64,
    pub relative_error: f64,
}

/// The committed calibration behind a scenario's simulator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub targets: Vec<CalibrationTarget>,
    /// Client counts the scenario is meant to be evaluated at.
    pub workloads: Vec<u32>,
    pub fit: FittedTimes,
    pub residuals: Vec<CalibrationResidual>,
    pub loss: f64,
    pub sweeps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: &'static str,
    pub document: ProblemDocument,
    pub calibration: CalibrationRecord,
}

pub fn lookup(name: &str) -> Option<Scenario> {
    match name {
        "plantnet" => Some(plantnet()),
        _ => None,
    }
}

/// Four thread pools of the identification engine, calibrated at 80 and 120
/// clients.
pub fn plantnet() -> Scenario {
    Scenario {
        name: "plantnet",
        document: parse_document(PLANTNET).expect("shipped scenario is valid"),
        calibration: serde_json::from_str(PLANTNET_CALIBRATION).expect("shipped calibration is valid"),
    }
}

/// Raw text of the shipped document.
pub fn plantnet_source() -> &'static str {
    PLANTNET
}

pub fn parse(text: &str) -> Result<ProblemDocument, Diagnostic> {
    parse_document(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_scenario_is_consistent() {
        let s = plantnet();
        let names: Vec<&str> = s
            .document
            .variables
            .variables()
            .iter()
            .map(|v| v.name.as_str())
            .collect();
        assert_eq!(names, ["http", "download", "extract", "simsearch"]);
        let sim = &s.document.executor.simulator;
        assert_eq!(sim.service_times, s.calibration.fit.service_times);
        assert_eq!(sim.gpu_efficiency, s.calibration.fit.gpu_efficiency);
        assert_eq!(s.calibration.workloads, [80, 120, 140]);
        assert_eq!(s.document.executor.repeats, 7);
        assert!(s.calibration.residuals.iter().all(|r| r.relative_error.abs() < 0.15));
    }

    #[test]
    fn baseline_lies_inside_the_bounds() {
        let s = plantnet();
        let base = s.document.baseline_config().unwrap().unwrap();
        assert_eq!(base.values(), [40.0, 40.0, 7.0, 40.0]);
        assert!(s.document.variables.validate(&base).is_ok());
    }

    #[test]
    fn unknown_name() {
        assert!(lookup("nope").is_none());
        assert!(NAMES.iter().all(|n| lookup(n).is_some()));
    }
}
