use rand::Rng;

use crate::problem::{Configuration, SearchSpace, VarKind};

/// Perturbs one uniformly chosen variable of `current` by a uniform step in
/// `±step_fraction * range`, then clamps and rounds. Integer steps are at
/// least one unit wide so that small ranges still move.
pub fn anneal_step<R: Rng>(
    space: &SearchSpace,
    current: &Configuration,
    step_fraction: f64,
    rng: &mut R,
) -> Configuration {
    let i = rng.random_range(0..space.arity());
    let var = &space.variables()[i];
    let mut width = step_fraction * var.range();
    if var.kind == VarKind::Integer {
        width = width.max(1.0);
    }
    let delta = rng.random_range(-width..=width);
    let mut values = current.values().to_vec();
    values[i] = var.snap(values[i] + delta);
    Configuration::new(values)
}

/// Metropolis acceptance probability for a loss increase of `delta` at
/// temperature `t`.
pub fn acceptance_probability(delta: f64, t: f64) -> f64 {
    if delta <= 0.0 {
        1.0
    } else if t <= 0.0 {
        0.0
    } else {
        (-delta / t).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Variable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_delta_is_always_accepted() {
        assert_eq!(acceptance_probability(0.0, 1e-300), 1.0);
        assert_eq!(acceptance_probability(-3.0, 0.5), 1.0);
    }

    #[test]
    fn cold_limit_rejects_worse_points() {
        assert_eq!(acceptance_probability(1.0, 1e-300), 0.0);
        assert_eq!(acceptance_probability(1.0, 0.0), 0.0);
    }

    #[test]
    fn step_moves_one_coordinate_within_bounds() {
        let space = SearchSpace::new(vec![
            Variable::integer("a", 0, 100).unwrap(),
            Variable::real("b", -1.0, 1.0).unwrap(),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let start = Configuration::new(vec![50.0, 0.0]);
        for _ in 0..500 {
            let next = anneal_step(&space, &start, 0.1, &mut rng);
            space.validate(&next).unwrap();
            let moved = (0..2).filter(|&i| next.get(i) != start.get(i)).count();
            assert!(moved <= 1);
            assert!((next.get(0) - 50.0).abs() <= 10.0);
            assert!(next.get(1).abs() <= 0.2 + 1e-12);
        }
    }
}
