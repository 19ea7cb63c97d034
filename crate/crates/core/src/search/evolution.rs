use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::problem::{Configuration, SearchSpace};

use super::SearchError;

/// One rand/1/bin trial vector and the members it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeTrial {
    /// Index of the parent it competes against.
    pub member: usize,
    /// Indices of `a`, `b`, `c` in `a + F * (b - c)`.
    pub donors: [usize; 3],
    pub config: Configuration,
}

/// Builds one trial per population member with the rand/1/bin scheme.
///
/// The mutant is clamped to the bounds; the trial is rounded after crossover.
pub fn de_generation<R: Rng>(
    space: &SearchSpace,
    population: &[Configuration],
    differential_weight: f64,
    crossover_rate: f64,
    rng: &mut R,
) -> Result<Vec<DeTrial>, SearchError> {
    let np = population.len();
    if np < 4 {
        return Err(SearchError::PopulationTooSmall(np));
    }
    let d = space.arity();
    let vars = space.variables();
    let mut trials = Vec::with_capacity(np);
    for i in 0..np {
        let mut donors = [0usize; 3];
        for k in 0..3 {
            donors[k] = loop {
                let j = rng.random_range(0..np);
                if j != i && !donors[..k].contains(&j) {
                    break j;
                }
            };
        }
        let [a, b, c] = donors.map(|j| population[j].values());
        let forced = rng.random_range(0..d);
        let values = (0..d)
            .map(|j| {
                let cross = j == forced || rng.random::<f64>() < crossover_rate;
                if cross {
                    let v = &vars[j];
                    let mutant = (a[j] + differential_weight * (b[j] - c[j])).clamp(v.lower, v.upper);
                    v.snap(mutant)
                } else {
                    population[i].get(j)
                }
            })
            .collect();
        trials.push(DeTrial {
            member: i,
            donors,
            config: Configuration::new(values),
        });
    }
    Ok(trials)
}
