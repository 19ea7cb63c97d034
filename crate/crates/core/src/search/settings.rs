use serde::{Deserialize, Serialize};

use crate::problem::SearchSpace;
use crate::sampling::{SampleMethod, SamplerSpec};
use crate::surrogate::{EnsembleParams, SeedMode};

use super::SearchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    BoExtraTrees,
    SimulatedAnnealing,
    DifferentialEvolution,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::BoExtraTrees => "bo_extra_trees",
            Algorithm::SimulatedAnnealing => "simulated_annealing",
            Algorithm::DifferentialEvolution => "differential_evolution",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    #[default]
    LowerConfidenceBound,
    ExpectedImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    pub kappa: f64,
    pub xi: f64,
    pub candidate_pool: usize,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self {
            kind: AcquisitionKind::LowerConfidenceBound,
            kappa: 1.96,
            xi: 0.01,
            candidate_pool: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub method: SampleMethod,
    /// Defaults to `max(5, 2 * arity)`, or to the population size for
    /// differential evolution.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_initial: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSettings {
    pub n_trees: usize,
    pub min_samples_split: usize,
    /// Defaults to the arity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_features: Option<usize>,
    pub splits_per_feature: usize,
    pub seed_mode: SeedMode,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        let p = EnsembleParams::default();
        Self {
            n_trees: p.n_trees,
            min_samples_split: p.min_samples_split,
            max_features: p.max_features,
            splits_per_feature: p.splits_per_feature,
            seed_mode: p.seed_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealingSpec {
    pub initial_temperature: f64,
    /// Geometric factor applied to the temperature after each tell.
    pub cooling: f64,
    /// Largest perturbation as a fraction of the variable's range.
    pub step_fraction: f64,
}

impl Default for AnnealingSpec {
    fn default() -> Self {
        Self {
            initial_temperature: 1.0,
            cooling: 0.95,
            step_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionSpec {
    /// Defaults to `max(4, 4 * arity)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population: Option<usize>,
    pub differential_weight: f64,
    pub crossover_rate: f64,
}

impl Default for EvolutionSpec {
    fn default() -> Self {
        Self {
            population: None,
            differential_weight: 0.7,
            crossover_rate: 0.9,
        }
    }
}

/// The `search` section of a problem document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSettings {
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Maximum number of evaluations, initial design included.
    pub budget: usize,
    /// Stop after this many consecutive tells without improvement; 0 disables.
    pub patience: usize,
    /// An improvement counts when it is at least `epsilon * |best|`.
    pub epsilon: f64,
    /// Normalized distance under which a candidate duplicates an asked point.
    pub duplicate_radius: f64,
    pub sampler: SamplerSettings,
    pub surrogate: SurrogateSettings,
    pub acquisition: AcquisitionSpec,
    pub annealing: AnnealingSpec,
    pub evolution: EvolutionSpec,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::BoExtraTrees,
            seed: 0,
            budget: 50,
            patience: 10,
            epsilon: 1e-3,
            duplicate_radius: 1e-6,
            sampler: SamplerSettings::default(),
            surrogate: SurrogateSettings::default(),
            acquisition: AcquisitionSpec::default(),
            annealing: AnnealingSpec::default(),
            evolution: EvolutionSpec::default(),
        }
    }
}

impl SearchSettings {
    /// Fills every optional value for `space` and checks ranges.
    pub fn resolve(&self, space: &SearchSpace) -> Result<SearchSettings, SearchError> {
        let d = space.arity();
        let mut s = self.clone();
        let population = s.evolution.population.unwrap_or((4 * d).max(4));
        s.evolution.population = Some(population);
        if s.algorithm == Algorithm::DifferentialEvolution && s.sampler.n_initial.is_some_and(|n| n != population) {
            return Err(SearchError::InvalidSettings(
                "differential evolution starts from its population; sampler.n_initial must equal evolution.population"
                    .into(),
            ));
        }
        let default_initial = match s.algorithm {
            Algorithm::DifferentialEvolution => population,
            _ => SamplerSpec::default_n_initial(d),
        };
        s.sampler.n_initial = Some(s.sampler.n_initial.unwrap_or(default_initial));
        s.surrogate.max_features = Some(s.surrogate.max_features.unwrap_or(d));
        s.validate(d)?;
        Ok(s)
    }

    fn validate(&self, d: usize) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidSettings(m.to_string()));
        if self.budget == 0 {
            return bad("budget must be >= 1");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be a finite number >= 0");
        }
        if !(self.duplicate_radius >= 0.0 && self.duplicate_radius.is_finite()) {
            return bad("duplicate_radius must be a finite number >= 0");
        }
        if self.sampler.n_initial == Some(0) {
            return bad("sampler.n_initial must be >= 1");
        }
        let a = &self.acquisition;
        if !(a.kappa >= 0.0 && a.kappa.is_finite()) {
            return bad("acquisition.kappa must be >= 0");
        }
        if !(a.xi >= 0.0 && a.xi.is_finite()) {
            return bad("acquisition.xi must be >= 0");
        }
        if a.candidate_pool == 0 {
            return bad("acquisition.candidate_pool must be >= 1");
        }
        self.ensemble_params()
            .validate(d)
            .map_err(|e| SearchError::InvalidSettings(format!("surrogate: {e}")))?;
        let t = &self.annealing;
        if !(t.initial_temperature > 0.0 && t.initial_temperature.is_finite()) {
            return bad("annealing.initial_temperature must be > 0");
        }
        if !(t.cooling > 0.0 && t.cooling <= 1.0) {
            return bad("annealing.cooling must lie in (0, 1]");
        }
        if !(t.step_fraction > 0.0 && t.step_fraction <= 1.0) {
            return bad("annealing.step_fraction must lie in (0, 1]");
        }
        let e = &self.evolution;
        if self.algorithm == Algorithm::DifferentialEvolution && e.population.is_some_and(|p| p < 4) {
            return Err(SearchError::PopulationTooSmall(e.population.unwrap_or(0)));
        }
        if !(e.differential_weight >= 0.0 && e.differential_weight <= 2.0) {
            return bad("evolution.differential_weight must lie in [0, 2]");
        }
        if !(e.crossover_rate >= 0.0 && e.crossover_rate <= 1.0) {
            return bad("evolution.crossover_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn n_initial(&self, arity: usize) -> usize {
        self.sampler.n_initial.unwrap_or(SamplerSpec::default_n_initial(arity))
    }

    pub fn sampler_spec(&self, arity: usize) -> SamplerSpec {
        SamplerSpec {
            method: self.sampler.method,
            n_initial: self.n_initial(arity),
            seed: self.seed,
        }
    }

    pub fn ensemble_params(&self) -> EnsembleParams {
        EnsembleParams {
            n_trees: self.surrogate.n_trees,
            min_samples_split: self.surrogate.min_samples_split,
            max_features: self.surrogate.max_features,
            splits_per_feature: self.surrogate.splits_per_feature,
            seed: self.seed,
            seed_mode: self.surrogate.seed_mode,
        }
    }
}
