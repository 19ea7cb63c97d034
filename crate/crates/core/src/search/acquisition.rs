use statrs::function::erf::erfc;

use crate::surrogate::Prediction;

use super::settings::{AcquisitionKind, AcquisitionSpec};

/// Lower confidence bound of a loss: smaller is more promising.
pub fn lower_confidence_bound(p: Prediction, kappa: f64) -> f64 {
    p.mean - kappa * p.spread
}

/// Expected improvement of a loss below `best` by more than `xi`.
pub fn expected_improvement(p: Prediction, best: f64, xi: f64) -> f64 {
    let gain = best - p.mean - xi;
    if p.spread <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / p.spread;
    let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    gain * cdf + p.spread * pdf
}

/// Score to minimize for one candidate.
pub fn score(spec: &AcquisitionSpec, p: Prediction, best: f64) -> f64 {
    match spec.kind {
        AcquisitionKind::LowerConfidenceBound => lower_confidence_bound(p, spec.kappa),
        AcquisitionKind::ExpectedImprovement => -expected_improvement(p, best, spec.xi),
    }
}

/// Index of the smallest score; the first one wins ties.
pub fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(mean: f64, spread: f64) -> Prediction {
        Prediction { mean, spread }
    }

    #[test]
    fn lcb_rewards_spread() {
        assert_eq!(lower_confidence_bound(pred(1.0, 0.5), 2.0), 0.0);
    }

    #[test]
    fn ei_without_spread_is_the_plain_gain() {
        assert_eq!(expected_improvement(pred(1.0, 0.0), 3.0, 0.5), 1.5);
        assert_eq!(expected_improvement(pred(5.0, 0.0), 3.0, 0.0), 0.0);
    }

    #[test]
    fn ei_at_zero_gain_is_spread_times_density() {
        let ei = expected_improvement(pred(2.0, 1.0), 2.0, 0.0);
        assert!((ei - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn argmin_prefers_lowest_index() {
        assert_eq!(argmin(&[3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(argmin(&[]), None);
    }
}
