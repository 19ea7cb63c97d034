//! Space-filling initial designs and uniform candidate pools.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{Configuration, SearchSpace, VarKind};
use crate::seed::{derive, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMethod {
    #[default]
    LatinHypercube,
    Halton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub method: SampleMethod,
    pub n_initial: usize,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn default_n_initial(arity: usize) -> usize {
        (2 * arity).max(5)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplingError {
    #[error("at least one point must be requested")]
    Empty,
}

/// Initial design of `spec.n_initial` points, all within bounds.
pub fn sample(space: &SearchSpace, spec: &SamplerSpec) -> Result<Vec<Configuration>, SamplingError> {
    let unit = unit_design(space.arity(), spec)?;
    Ok(unit.iter().map(|u| space.from_unit(u)).collect())
}

/// The design in the unit hypercube, before scaling and rounding.
pub fn unit_design(dims: usize, spec: &SamplerSpec) -> Result<Vec<Vec<f64>>, SamplingError> {
    if spec.n_initial == 0 {
        return Err(SamplingError::Empty);
    }
    Ok(match spec.method {
        SampleMethod::LatinHypercube => latin_hypercube(dims, spec.n_initial, spec.seed),
        SampleMethod::Halton => halton(dims, spec.n_initial),
    })
}

fn latin_hypercube(dims: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[seed, stream::SAMPLER]));
    let mut points = vec![vec![0.0; dims]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for d in 0..dims {
        strata.shuffle(&mut rng);
        for (point, &k) in points.iter_mut().zip(&strata) {
            let jitter: f64 = rng.random();
            point[d] = ((k as f64 + jitter) / n as f64).min(next_down((k + 1) as f64 / n as f64));
        }
    }
    points
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

fn halton(dims: usize, n: usize) -> Vec<Vec<f64>> {
    let bases = primes(dims);
    (1..=n as u64)
        .map(|i| bases.iter().map(|&b| radical_inverse(i, b)).collect())
        .collect()
}

/// Van der Corput radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    value
}

/// The first `count` primes.
pub fn primes(count: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(count);
    let mut candidate = 2;
    while out.len() < count {
        if out
            .iter()
            .take_while(|&&p| p * p <= candidate)
            .all(|&p| candidate % p != 0)
        {
            out.push(candidate);
        }
        candidate += 1;
    }
    out
}

/// `n` independent uniform points. Integer variables are drawn uniformly over
/// their whole values.
pub fn random_candidates(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<Configuration>, SamplingError> {
    if n == 0 {
        return Err(SamplingError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[seed, stream::CANDIDATES]));
    Ok((0..n).map(|_| random_point(space, &mut rng)).collect())
}

pub(crate) fn random_point<R: Rng>(space: &SearchSpace, rng: &mut R) -> Configuration {
    Configuration::new(
        space
            .variables()
            .iter()
            .map(|v| match v.kind {
                VarKind::Integer => rng.random_range(v.lower as i64..=v.upper as i64) as f64,
                VarKind::Real => v.lower + rng.random::<f64>() * v.range(),
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Variable;

    fn unit_square() -> SearchSpace {
        SearchSpace::new(vec![
            Variable::real("x", 0.0, 1.0).unwrap(),
            Variable::real("y", 0.0, 1.0).unwrap(),
        ])
        .unwrap()
    }

    fn pools() -> SearchSpace {
        SearchSpace::new(vec![
            Variable::integer("http", 20, 60).unwrap(),
            Variable::integer("download", 20, 60).unwrap(),
            Variable::integer("extract", 3, 9).unwrap(),
            Variable::integer("simsearch", 20, 60).unwrap(),
        ])
        .unwrap()
    }

    fn spec(method: SampleMethod, n: usize, seed: u64) -> SamplerSpec {
        SamplerSpec {
            method,
            n_initial: n,
            seed,
        }
    }

    fn strata_counts(points: &[Configuration], dim: usize, n: usize) -> Vec<usize> {
        let mut counts = vec![0; n];
        for p in points {
            let k = ((p.get(dim) * n as f64) as usize).min(n - 1);
            counts[k] += 1;
        }
        counts
    }

    #[test]
    fn lhs_four_points_fill_every_quarter() {
        let pts = sample(&unit_square(), &spec(SampleMethod::LatinHypercube, 4, 11)).unwrap();
        assert_eq!(strata_counts(&pts, 0, 4), [1, 1, 1, 1]);
        assert_eq!(strata_counts(&pts, 1, 4), [1, 1, 1, 1]);
    }

    #[test]
    fn halton_base_two_by_hand() {
        let space = SearchSpace::new(vec![Variable::real("x", 0.0, 1.0).unwrap()]).unwrap();
        let pts = sample(&space, &spec(SampleMethod::Halton, 3, 0)).unwrap();
        let xs: Vec<f64> = pts.iter().map(|p| p.get(0)).collect();
        assert_eq!(xs, [0.5, 0.25, 0.75]);
    }

    #[test]
    fn halton_second_dimension_uses_base_three() {
        let pts = halton(2, 3);
        assert_eq!(pts[0][1], 1.0 / 3.0);
        assert_eq!(pts[1][1], 2.0 / 3.0);
        assert_eq!(pts[2][1], 1.0 / 9.0);
    }

    #[test]
    fn lhs_on_pool_space_is_in_bounds() {
        let space = pools();
        let pts = sample(&space, &spec(SampleMethod::LatinHypercube, 5, 3)).unwrap();
        assert_eq!(pts.len(), 5);
        for p in &pts {
            space.validate(p).unwrap();
        }
    }

    #[test]
    fn candidates_are_deterministic() {
        let space = SearchSpace::new(vec![Variable::real("x", 0.0, 1.0).unwrap()]).unwrap();
        let a = random_candidates(&space, 1, 42).unwrap();
        let b = random_candidates(&space, 1, 42).unwrap();
        assert_eq!(a, b);
        space.validate(&a[0]).unwrap();
    }

    #[test]
    fn candidates_cover_every_integer_value() {
        let space = SearchSpace::new(vec![Variable::integer("extract", 3, 9).unwrap()]).unwrap();
        let pts = random_candidates(&space, 1000, 0).unwrap();
        for v in 3..=9 {
            assert!(pts.iter().any(|p| p.get(0) == v as f64), "{v} missing");
        }
    }

    #[test]
    fn zero_points_are_rejected() {
        assert_eq!(random_candidates(&pools(), 0, 1), Err(SamplingError::Empty));
        assert_eq!(
            sample(&pools(), &spec(SampleMethod::Halton, 0, 1)),
            Err(SamplingError::Empty)
        );
    }

    #[test]
    fn primes_are_the_first_ones() {
        assert_eq!(primes(8), [2, 3, 5, 7, 11, 13, 17, 19]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lhs_is_stratified(n in 1usize..200, dims in 1usize..8, seed: u64) {
                let design = unit_design(dims, &spec(SampleMethod::LatinHypercube, n, seed)).unwrap();
                for d in 0..dims {
                    let mut seen = vec![false; n];
                    for p in &design {
                        let k = (p[d] * n as f64).floor() as usize;
                        prop_assert!(k < n && !seen[k]);
                        seen[k] = true;
                    }
                }
            }

            #[test]
            fn samples_respect_bounds(n in 1usize..50, seed: u64, halton_method: bool) {
                let space = pools();
                let method = if halton_method { SampleMethod::Halton } else { SampleMethod::LatinHypercube };
                for p in sample(&space, &spec(method, n, seed)).unwrap() {
                    prop_assert!(space.validate(&p).is_ok());
                }
                for p in random_candidates(&space, n, seed).unwrap() {
                    prop_assert!(space.validate(&p).is_ok());
                }
            }

            #[test]
            fn sampling_is_deterministic(n in 1usize..30, seed: u64) {
                let s = spec(SampleMethod::LatinHypercube, n, seed);
                prop_assert_eq!(sample(&pools(), &s).unwrap(), sample(&pools(), &s).unwrap());
            }
        }
    }
}
