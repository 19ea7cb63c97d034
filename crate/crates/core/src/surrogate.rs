//! Extremely randomized regression trees used as the optimizer's surrogate.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive, mix, stream};

/// Version tag of the checkpoint format.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("need at least 2 rows to fit, got {0}")]
    TooFewRows(usize),
    #[error("target of row {0} is not finite")]
    NonFiniteTarget(usize),
    #[error("row has {got} features, model expects {expected}")]
    Arity { expected: usize, got: usize },
    #[error("invalid ensemble parameter: {0}")]
    InvalidParams(String),
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error("checkpoint: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Io(#[from] std::io::Error),
}

/// Training rows sharing one arity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    arity: usize,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
}

impl Dataset {
    pub fn new(arity: usize) -> Self {
        Self {
            arity,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    pub fn from_rows(arity: usize, rows: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Result<Self, SurrogateError> {
        let mut d = Self::new(arity);
        for (x, y) in rows {
            d.push(x, y)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<(), SurrogateError> {
        if x.len() != self.arity {
            return Err(SurrogateError::Arity {
                expected: self.arity,
                got: x.len(),
            });
        }
        if !y.is_finite() {
            return Err(SurrogateError::NonFiniteTarget(self.ys.len()));
        }
        self.xs.push(x);
        self.ys.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.ys[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.ys
    }

    /// Rows sorted by their bit patterns, so that the result does not depend
    /// on insertion order.
    fn canonical(&self) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let key = |i: usize| {
            let mut k: Vec<u64> = self.xs[i].iter().map(|v| v.to_bits()).collect();
            k.push(self.ys[i].to_bits());
            k
        };
        order.sort_by_cached_key(|&i| key(i));
        Dataset {
            arity: self.arity,
            xs: order.iter().map(|&i| self.xs[i].clone()).collect(),
            ys: order.iter().map(|&i| self.ys[i]).collect(),
        }
    }

    fn content_hash(&self) -> u64 {
        let mut h = mix(self.arity as u64);
        for (x, y) in self.xs.iter().zip(&self.ys) {
            for v in x {
                h = mix(h ^ v.to_bits());
            }
            h = mix(h ^ y.to_bits());
        }
        h
    }
}

/// How the per-fit seed is obtained from `EnsembleParams::seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// Seed from the base seed and the dataset length.
    #[default]
    Fixed,
    /// Seed from the base seed and the dataset content; rows are put in a
    /// canonical order first.
    ContentHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleParams {
    pub n_trees: usize,
    pub min_samples_split: usize,
    /// Features drawn per node; `None` uses every feature.
    pub max_features: Option<usize>,
    pub splits_per_feature: usize,
    pub seed: u64,
    pub seed_mode: SeedMode,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            min_samples_split: 2,
            max_features: None,
            splits_per_feature: 1,
            seed: 0,
            seed_mode: SeedMode::Fixed,
        }
    }
}

impl EnsembleParams {
    pub fn validate(&self, arity: usize) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::InvalidParams(m.to_string()));
        if self.n_trees == 0 {
            return bad("n_trees must be >= 1");
        }
        if self.min_samples_split < 2 {
            return bad("min_samples_split must be >= 2");
        }
        if let Some(m) = self.max_features {
            if m == 0 || m > arity {
                return bad("max_features must lie in [1, arity]");
            }
        }
        if self.splits_per_feature == 0 {
            return bad("splits_per_feature must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
        rows: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
                Node::Leaf { value, .. } => return value,
            }
        }
    }
}

struct Builder<'a> {
    data: &'a Dataset,
    params: &'a EnsembleParams,
    max_features: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

fn sse(ys: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = ys.clone().fold((0usize, 0.0), |(n, s), y| (n + 1, s + y));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    ys.map(|y| (y - mean) * (y - mean)).sum()
}

impl Builder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let (lo, hi, sum) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(lo, hi, s), &r| {
                let y = self.data.ys[r];
                (lo.min(y), hi.max(y), s + y)
            });
        let value = (sum / rows.len() as f64).clamp(lo, hi);
        self.nodes.push(Node::Leaf {
            value,
            rows: rows.len(),
        });
        self.nodes.len() - 1
    }

    fn build(&mut self, rows: Vec<usize>) -> usize {
        let ys = |rows: &[usize]| rows.iter().map(|&r| self.data.ys[r]).collect::<Vec<_>>();
        let targets = ys(&rows);
        let constant = targets.iter().all(|&y| y == targets[0]);
        if rows.len() < self.params.min_samples_split || constant {
            return self.leaf(&rows);
        }
        let ranges: Vec<(usize, f64, f64)> = (0..self.data.arity)
            .filter_map(|f| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    let v = self.data.xs[r][f];
                    (lo.min(v), hi.max(v))
                });
                (lo < hi).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return self.leaf(&rows);
        }
        let k = self.max_features.min(ranges.len());
        let mut picked = index::sample(&mut self.rng, ranges.len(), k).into_vec();
        picked.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None;
        for &p in &picked {
            let (feature, lo, hi) = ranges[p];
            for _ in 0..self.params.splits_per_feature {
                let u: f64 = self.rng.random();
                let mut t = lo + u * (hi - lo);
                if !(t > lo && t < hi) {
                    t = lo + 0.5 * (hi - lo);
                }
                if !(t > lo && t < hi) {
                    t = lo;
                }
                let left = rows
                    .iter()
                    .filter(|&&r| self.data.xs[r][feature] <= t)
                    .map(|&r| self.data.ys[r]);
                let right = rows
                    .iter()
                    .filter(|&&r| self.data.xs[r][feature] > t)
                    .map(|&r| self.data.ys[r]);
                let score = sse(left) + sse(right);
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, feature, t));
                }
            }
        }
        let (_, feature, threshold) = best.expect("at least one candidate split");
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.data.xs[i][feature] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0, rows: 0 });
        let left = self.build(l);
        let right = self.build(r);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

/// A fitted ensemble. Keeps its training data so it can be refitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    version: u32,
    params: EnsembleParams,
    arity: usize,
    fit_seed: u64,
    target_range: (f64, f64),
    trees: Vec<Tree>,
    data: Dataset,
}

/// Mean and cross-tree standard deviation of a prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub spread: f64,
}

/// Fits `params.n_trees` trees, each on all rows.
pub fn fit(data: &Dataset, params: &EnsembleParams) -> Result<EnsembleModel, SurrogateError> {
    if data.len() < 2 {
        return Err(SurrogateError::TooFewRows(data.len()));
    }
    if let Some(i) = data.ys.iter().position(|y| !y.is_finite()) {
        return Err(SurrogateError::NonFiniteTarget(i));
    }
    params.validate(data.arity)?;
    let (data, fit_seed) = match params.seed_mode {
        SeedMode::Fixed => (
            data.clone(),
            derive(&[params.seed, stream::SURROGATE, data.len() as u64]),
        ),
        SeedMode::ContentHash => {
            let canonical = data.canonical();
            let h = canonical.content_hash();
            (canonical, derive(&[params.seed, stream::SURROGATE, h]))
        }
    };
    let max_features = params.max_features.unwrap_or(data.arity);
    let trees = (0..params.n_trees)
        .map(|t| {
            let mut b = Builder {
                data: &data,
                params,
                max_features,
                rng: ChaCha8Rng::seed_from_u64(derive(&[fit_seed, t as u64])),
                nodes: Vec::new(),
            };
            b.build((0..data.len()).collect());
            Tree { nodes: b.nodes }
        })
        .collect();
    let lo = data.ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(EnsembleModel {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
        arity: data.arity,
        fit_seed,
        target_range: (lo, hi),
        trees,
        data,
    })
}

/// Rebuilds from scratch on the model's data plus `rows`.
pub fn refit(
    model: &EnsembleModel,
    rows: impl IntoIterator<Item = (Vec<f64>, f64)>,
) -> Result<EnsembleModel, SurrogateError> {
    let mut data = model.data.clone();
    for (x, y) in rows {
        data.push(x, y)?;
    }
    fit(&data, &model.params)
}

impl EnsembleModel {
    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn params(&self) -> &EnsembleParams {
        &self.params
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Number of nodes per tree.
    pub fn tree_sizes(&self) -> Vec<usize> {
        self.trees.iter().map(|t| t.nodes.len()).collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, SurrogateError> {
        if x.len() != self.arity {
            return Err(SurrogateError::Arity {
                expected: self.arity,
                got: x.len(),
            });
        }
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> Prediction {
        let values: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        let n = values.len() as f64;
        let mean = (values.iter().sum::<f64>() / n).clamp(self.target_range.0, self.target_range.1);
        let spread = if values.len() < 2 {
            0.0
        } else {
            let m = values.iter().sum::<f64>() / n;
            (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Prediction { mean, spread }
    }

    /// Mean squared error of the ensemble mean on its own training rows.
    pub fn training_mse(&self) -> f64 {
        let n = self.data.len() as f64;
        (0..self.data.len())
            .map(|i| {
                let e = self.predict_unchecked(self.data.x(i)).mean - self.data.y(i);
                e * e
            })
            .sum::<f64>()
            / n
    }

    /// Checks the structural invariants of every tree against the training data.
    pub fn check_invariants(&self) -> Result<(), String> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        for (t, tree) in self.trees.iter().enumerate() {
            let mut stack = vec![(0usize, all.clone())];
            while let Some((i, rows)) = stack.pop() {
                match &tree.nodes[i] {
                    Node::Leaf { rows: n, .. } => {
                        if rows.is_empty() || *n != rows.len() {
                            return Err(format!("tree {t}: leaf {i} reached by {} rows", rows.len()));
                        }
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let vals = rows.iter().map(|&r| self.data.x(r)[*feature]);
                        let lo = vals.clone().fold(f64::INFINITY, f64::min);
                        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                        if !(*threshold > lo && *threshold < hi) {
                            return Err(format!("tree {t}: threshold {threshold} not inside ({lo}, {hi})"));
                        }
                        let (l, r) = rows.iter().partition(|&&r| self.data.x(r)[*feature] <= *threshold);
                        stack.push((*left, l));
                        stack.push((*right, r));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SurrogateError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(s)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(SurrogateError::Version(header.version));
        }
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n_trees: usize, seed: u64) -> EnsembleParams {
        EnsembleParams {
            n_trees,
            seed,
            ..EnsembleParams::default()
        }
    }

    fn plane(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::from_rows(
            2,
            (0..n).map(|_| {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                (vec![a, b], a + b)
            }),
        )
        .unwrap()
    }

    fn variance(ys: &[f64]) -> f64 {
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / ys.len() as f64
    }

    #[test]
    fn constant_targets_make_single_leaves() {
        let data = Dataset::from_rows(2, (0..10).map(|i| (vec![i as f64, (i * i) as f64], 3.5))).unwrap();
        let m = fit(&data, &params(20, 1)).unwrap();
        assert!(m.tree_sizes().iter().all(|&s| s == 1));
        let p = m.predict(&[100.0, -4.0]).unwrap();
        assert_eq!((p.mean, p.spread), (3.5, 0.0));
    }

    #[test]
    fn two_rows_are_separated_by_one_split() {
        let data = Dataset::from_rows(1, [(vec![0.0], 10.0), (vec![1.0], 0.0)]).unwrap();
        let m = fit(&data, &params(5, 3)).unwrap();
        assert!(m.tree_sizes().iter().all(|&s| s == 3));
        assert_eq!(m.predict(&[0.0]).unwrap().mean, 10.0);
        assert_eq!(m.predict(&[1.0]).unwrap().mean, 0.0);
    }

    #[test]
    fn single_tree_has_zero_spread() {
        let m = fit(&plane(30, 1), &params(1, 1)).unwrap();
        assert_eq!(m.predict(&[0.3, 0.9]).unwrap().spread, 0.0);
    }

    #[test]
    fn plane_fit_beats_the_mean_predictor() {
        let data = plane(50, 7);
        let m = fit(&data, &params(50, 7)).unwrap();
        assert!(m.training_mse() < variance(data.targets()));
        m.check_invariants().unwrap();
    }

    #[test]
    fn plane_prediction_at_unseen_point() {
        let m = fit(&plane(50, 7), &params(50, 7)).unwrap();
        let p = m.predict(&[0.4, 0.45]).unwrap();
        assert!((p.mean - 0.85).abs() < 0.15, "{}", p.mean);
    }

    #[test]
    fn refit_without_rows_reproduces_the_model() {
        let m = fit(&plane(20, 2), &params(30, 5)).unwrap();
        let r = refit(&m, []).unwrap();
        for i in 0..=10 {
            for j in 0..=10 {
                let x = [i as f64 / 10.0, j as f64 / 10.0];
                assert_eq!(m.predict(&x).unwrap(), r.predict(&x).unwrap());
            }
        }
    }

    #[test]
    fn refit_with_duplicate_row_moves_within_spread() {
        let data = plane(20, 4);
        let m = fit(&data, &params(100, 9)).unwrap();
        let x = data.x(3).to_vec();
        let r = refit(&m, [(x.clone(), data.y(3))]).unwrap();
        let (before, after) = (m.predict(&x).unwrap(), r.predict(&x).unwrap());
        assert!((after.mean - before.mean).abs() <= before.spread.max(after.spread) + 1e-12);
    }

    #[test]
    fn refit_with_informative_row_keeps_mse_low() {
        let data = plane(20, 4);
        let m = fit(&data, &params(100, 9)).unwrap();
        let r = refit(&m, [(vec![0.99, 0.99], 1.98)]).unwrap();
        let combined = refit(&m, [(vec![0.99, 0.99], 1.98)]).unwrap().data().clone();
        let mse = |model: &EnsembleModel| {
            (0..combined.len())
                .map(|i| (model.predict(combined.x(i)).unwrap().mean - combined.y(i)).powi(2))
                .sum::<f64>()
                / combined.len() as f64
        };
        assert!(mse(&r) <= mse(&m));
    }

    #[test]
    fn checkpoint_round_trips() {
        let m = fit(&plane(25, 3), &params(10, 3)).unwrap();
        let back = EnsembleModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&[0.2, 0.7]).unwrap(), m.predict(&[0.2, 0.7]).unwrap());
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let json = fit(&plane(5, 3), &params(2, 3))
            .unwrap()
            .to_json()
            .replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            EnsembleModel::from_json(&json),
            Err(SurrogateError::Version(9))
        ));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            fit(&plane(1, 0), &params(1, 0)),
            Err(SurrogateError::TooFewRows(1))
        ));
        let mut d = Dataset::new(1);
        assert!(d.push(vec![0.0], f64::NAN).is_err());
        assert!(d.push(vec![0.0, 1.0], 1.0).is_err());
        let m = fit(&plane(5, 0), &params(1, 0)).unwrap();
        assert!(m.predict(&[0.0]).is_err());
        let bad = EnsembleParams {
            max_features: Some(3),
            ..EnsembleParams::default()
        };
        assert!(fit(&plane(5, 0), &bad).is_err());
    }

    #[test]
    fn more_trees_fit_at_least_as_well_on_average() {
        let (mut one, mut many) = (0.0, 0.0);
        let grown = |n_trees, seed| EnsembleParams {
            min_samples_split: 6,
            ..params(n_trees, seed)
        };
        for seed in 0..20 {
            let data = plane(30, 100 + seed);
            one += fit(&data, &grown(1, seed)).unwrap().training_mse();
            many += fit(&data, &grown(100, seed)).unwrap().training_mse();
        }
        assert!(many <= one, "{many} > {one}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rows() -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
            proptest::collection::vec((proptest::collection::vec(-5.0f64..5.0, 3), -100.0f64..100.0), 2..25)
        }

        proptest! {
            #[test]
            fn predictions_stay_in_target_range(rows in rows(), seed: u64, probe in proptest::collection::vec(-10.0f64..10.0, 3)) {
                let data = Dataset::from_rows(3, rows).unwrap();
                let m = fit(&data, &params(10, seed)).unwrap();
                let lo = data.targets().iter().copied().fold(f64::INFINITY, f64::min);
                let hi = data.targets().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let p = m.predict(&probe).unwrap();
                prop_assert!(p.mean >= lo && p.mean <= hi);
                prop_assert!(m.check_invariants().is_ok());
            }

            #[test]
            fn content_seeding_ignores_row_order(rows in rows(), seed: u64, probe in proptest::collection::vec(-5.0f64..5.0, 3)) {
                let p = EnsembleParams { n_trees: 8, seed, seed_mode: SeedMode::ContentHash, ..EnsembleParams::default() };
                let data = Dataset::from_rows(3, rows.clone()).unwrap();
                let reversed = Dataset::from_rows(3, rows.into_iter().rev()).unwrap();
                let a = fit(&data, &p).unwrap().predict(&probe).unwrap();
                let b = fit(&reversed, &p).unwrap().predict(&probe).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn fitting_is_deterministic(rows in rows(), seed: u64) {
                let data = Dataset::from_rows(3, rows).unwrap();
                prop_assert_eq!(fit(&data, &params(5, seed)).unwrap(), fit(&data, &params(5, seed)).unwrap());
            }
        }
    }
}
