//! Fits the simulator against the two observed baseline response times and
//! prints the calibration as JSON.
//!
//! cargo run --release -p contune-sim --example calibrate_plantnet > calibration.json

use contune_sim::{calibrate, CalibrationOptions, CalibrationTarget, PoolConfig, SimParams};

fn main() {
    let targets = [(80, 2.657), (120, 3.86)].map(|(clients, response_time)| CalibrationTarget {
        pools: PoolConfig::BASELINE,
        clients,
        response_time,
    });
    let start = SimParams {
        jitter: 0.0,
        ..SimParams::default()
    };
    let fit = calibrate(&targets, &start, &CalibrationOptions::default()).expect("targets are valid");
    eprintln!(
        "loss {:.3e} after {} sweeps, max relative error {:.4}",
        fit.loss,
        fit.sweeps,
        fit.max_relative_error()
    );
    println!(
        "{}",
        serde_json::to_string_pretty(&fit).expect("calibration serializes")
    );
}
