//! Ask/tell optimizers: Bayesian optimization over an Extra-Trees surrogate,
//! simulated annealing and differential evolution.
//!
//! Every [`Optimizer`] starts with a space-filling initial design, then asks
//! its algorithm for further points. Values are handled internally as losses
//! (objective times the direction sign) so that every algorithm minimizes.

mod acquisition;
mod anneal;
mod evolution;
mod settings;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{Configuration, ProblemSpec};
use crate::sampling::{random_candidates, random_point, sample};
use crate::seed::{derive, stream};
use crate::surrogate::{fit, Dataset, EnsembleModel};

pub use acquisition::{argmin, expected_improvement, lower_confidence_bound};
pub use anneal::{acceptance_probability, anneal_step};
pub use evolution::{de_generation, DeTrial};
pub use settings::{
    AcquisitionKind, AcquisitionSpec, Algorithm, AnnealingSpec, EvolutionSpec, SamplerSettings, SearchSettings,
    SurrogateSettings,
};

/// Attempts at finding a feasible random point before giving up.
const FEASIBLE_DRAWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search settings: {0}")]
    InvalidSettings(String),
    #[error("differential evolution needs a population of at least 4, got {0}")]
    PopulationTooSmall(usize),
    #[error("proposal {0} is not pending")]
    UnknownProposal(u64),
    #[error("no configuration satisfies the variable constraints")]
    NoFeasiblePoint,
    #[error(transparent)]
    Sampling(#[from] crate::sampling::SamplingError),
    #[error(transparent)]
    Surrogate(#[from] crate::surrogate::SurrogateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Patience,
    NoCandidates,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Budget => "budget",
            StopReason::Patience => "patience",
            StopReason::NoCandidates => "no_candidates",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Guided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub id: u64,
    pub config: Configuration,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ask {
    Point(Proposal),
    /// Nothing can be proposed until a pending point is told.
    Wait,
    Exhausted(StopReason),
}

/// A told point.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub id: u64,
    pub config: Configuration,
    pub phase: Phase,
    /// Objective value; `None` for failed evaluations.
    pub objective: Option<f64>,
    /// Loss fed to the algorithm at tell time (penalty for failures).
    pub loss: f64,
    pub failure: Option<String>,
}

impl Observation {
    pub fn succeeded(&self) -> bool {
        self.objective.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TellReport {
    pub loss: f64,
    pub improved: bool,
    pub failed: bool,
}

struct AnnealState {
    current: Option<(Configuration, f64)>,
    temperature: f64,
}

struct EvolutionState {
    population: Vec<(Configuration, f64)>,
    generation: u64,
    trials: Vec<DeTrial>,
    issued: usize,
    results: BTreeMap<usize, (Configuration, f64)>,
    members: BTreeMap<u64, usize>,
}

enum AlgoState {
    Bo,
    Anneal(AnnealState),
    Evolution(EvolutionState),
}

/// Single-owner optimizer state. Proposals carry dense ids from 0.
pub struct Optimizer {
    problem: ProblemSpec,
    settings: SearchSettings,
    initial: Vec<Configuration>,
    next_id: u64,
    pending: BTreeMap<u64, (Configuration, Phase)>,
    told: Vec<Observation>,
    best: Option<usize>,
    stall: usize,
    model: Option<(usize, EnsembleModel)>,
    algo: AlgoState,
}

impl Optimizer {
    pub fn new(problem: ProblemSpec, settings: &SearchSettings) -> Result<Self, SearchError> {
        let settings = settings.resolve(problem.space())?;
        let space = problem.space();
        let mut initial = sample(space, &settings.sampler_spec(space.arity()))?;
        for (i, point) in initial.iter_mut().enumerate() {
            if !problem.feasible_before_evaluation(point) {
                let mut rng = ChaCha8Rng::seed_from_u64(derive(&[settings.seed, stream::SAMPLER, i as u64]));
                *point = feasible_draw(&problem, &mut rng)?;
            }
        }
        Self::with_initial_design(problem, settings, initial)
    }

    /// Uses `initial` in place of the sampled design.
    pub fn with_initial_design(
        problem: ProblemSpec,
        settings: SearchSettings,
        initial: Vec<Configuration>,
    ) -> Result<Self, SearchError> {
        let settings = settings.resolve(problem.space())?;
        for point in &initial {
            problem
                .space()
                .validate(point)
                .map_err(|e| SearchError::InvalidSettings(format!("initial design: {e}")))?;
        }
        let algo = match settings.algorithm {
            Algorithm::BoExtraTrees => AlgoState::Bo,
            Algorithm::SimulatedAnnealing => AlgoState::Anneal(AnnealState {
                current: None,
                temperature: settings.annealing.initial_temperature,
            }),
            Algorithm::DifferentialEvolution => {
                if initial.len() < 4 {
                    return Err(SearchError::PopulationTooSmall(initial.len()));
                }
                AlgoState::Evolution(EvolutionState {
                    population: Vec::new(),
                    generation: 0,
                    trials: Vec::new(),
                    issued: 0,
                    results: BTreeMap::new(),
                    members: BTreeMap::new(),
                })
            }
        };
        Ok(Self {
            problem,
            settings,
            initial,
            next_id: 0,
            pending: BTreeMap::new(),
            told: Vec::new(),
            best: None,
            stall: 0,
            model: None,
            algo,
        })
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    /// Settings with every default filled in.
    pub fn settings(&self) -> &SearchSettings {
        &self.settings
    }

    pub fn initial_design(&self) -> &[Configuration] {
        &self.initial
    }

    pub fn observations(&self) -> &[Observation] {
        &self.told
    }

    pub fn pending(&self) -> impl Iterator<Item = (u64, &Configuration)> {
        self.pending.iter().map(|(&id, (c, _))| (id, c))
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn asked(&self) -> u64 {
        self.next_id
    }

    pub fn best(&self) -> Option<&Observation> {
        self.best.map(|i| &self.told[i])
    }

    /// Consecutive tells without sufficient improvement.
    pub fn stall(&self) -> usize {
        self.stall
    }

    /// Set once the budget is spent or patience runs out.
    pub fn converged(&self) -> Option<StopReason> {
        if self.told.len() >= self.settings.budget {
            Some(StopReason::Budget)
        } else if self.settings.patience > 0 && self.stall >= self.settings.patience {
            Some(StopReason::Patience)
        } else {
            None
        }
    }

    pub fn ask(&mut self) -> Result<Ask, SearchError> {
        if let Some(reason) = self.converged() {
            return Ok(Ask::Exhausted(reason));
        }
        if self.told.len() + self.pending.len() >= self.settings.budget {
            return Ok(Ask::Exhausted(StopReason::Budget));
        }
        let id = self.next_id;
        let issued = id as usize;
        let (config, phase) = if issued < self.initial.len() {
            (self.initial[issued].clone(), Phase::Initial)
        } else {
            let next = match self.algo {
                AlgoState::Bo => self.ask_bo(id)?,
                AlgoState::Anneal(_) => self.ask_anneal(id)?,
                AlgoState::Evolution(_) => self.ask_evolution(id)?,
            };
            match next {
                Ok(config) => (config, Phase::Guided),
                Err(ask) => return Ok(ask),
            }
        };
        self.next_id += 1;
        self.pending.insert(id, (config.clone(), phase));
        Ok(Ask::Point(Proposal { id, config, phase }))
    }

    fn random_fallback(&self, id: u64) -> Result<Result<Configuration, Ask>, SearchError> {
        if !self.pending.is_empty() {
            return Ok(Err(Ask::Wait));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(&[self.settings.seed, stream::CANDIDATES, id]));
        feasible_draw(&self.problem, &mut rng).map(Ok)
    }

    fn ask_bo(&mut self, id: u64) -> Result<Result<Configuration, Ask>, SearchError> {
        if self.told.len() < 2 {
            return self.random_fallback(id);
        }
        let space = self.problem.space();
        let candidates = random_candidates(
            space,
            self.settings.acquisition.candidate_pool,
            derive(&[self.settings.seed, id]),
        )?;
        let taken: Vec<Vec<f64>> = self
            .pending
            .values()
            .map(|(c, _)| c)
            .chain(self.told.iter().map(|o| &o.config))
            .map(|c| space.normalize(c))
            .collect();
        let radius = self.settings.duplicate_radius;
        let candidates: Vec<Configuration> = candidates
            .into_iter()
            .filter(|c| self.problem.feasible_before_evaluation(c))
            .filter(|c| {
                let u = space.normalize(c);
                taken.iter().all(|t| distance(&u, t) > radius)
            })
            .collect();
        if candidates.is_empty() {
            return Ok(Err(Ask::Exhausted(StopReason::NoCandidates)));
        }
        let spec = self.settings.acquisition.clone();
        let incumbent = self.best_loss().unwrap_or(f64::INFINITY);
        let model = self.current_model()?.expect("two told points");
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| acquisition::score(&spec, model.predict_unchecked(c.values()), incumbent))
            .collect();
        let pick = argmin(&scores).expect("non-empty pool");
        Ok(Ok(candidates[pick].clone()))
    }

    fn ask_anneal(&mut self, id: u64) -> Result<Result<Configuration, Ask>, SearchError> {
        let AlgoState::Anneal(state) = &self.algo else {
            unreachable!()
        };
        let Some((current, _)) = &state.current else {
            return self.random_fallback(id);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive(&[self.settings.seed, stream::ANNEALING, id]));
        for _ in 0..FEASIBLE_DRAWS {
            let next = anneal_step(
                self.problem.space(),
                current,
                self.settings.annealing.step_fraction,
                &mut rng,
            );
            if self.problem.feasible_before_evaluation(&next) {
                return Ok(Ok(next));
            }
        }
        Ok(Ok(current.clone()))
    }

    fn ask_evolution(&mut self, id: u64) -> Result<Result<Configuration, Ask>, SearchError> {
        let seed = self.settings.seed;
        let space = self.problem.space().clone();
        let (f, cr) = (
            self.settings.evolution.differential_weight,
            self.settings.evolution.crossover_rate,
        );
        let AlgoState::Evolution(state) = &mut self.algo else {
            unreachable!()
        };
        if state.population.is_empty() || state.issued == state.trials.len() && !state.trials.is_empty() {
            return Ok(Err(Ask::Wait));
        }
        if state.trials.is_empty() {
            let configs: Vec<Configuration> = state.population.iter().map(|(c, _)| c.clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive(&[seed, stream::EVOLUTION, state.generation]));
            state.trials = de_generation(&space, &configs, f, cr, &mut rng)?;
        }
        let trial = &state.trials[state.issued];
        state.members.insert(id, trial.member);
        state.issued += 1;
        Ok(Ok(trial.config.clone()))
    }

    /// Tells an objective value; non-finite values count as failures.
    pub fn tell(&mut self, id: u64, value: f64) -> Result<TellReport, SearchError> {
        if value.is_finite() {
            self.record(id, Some(value), None)
        } else {
            self.record(id, None, Some(format!("non-finite objective {value}")))
        }
    }

    /// Tells a metrics map: extracts the objective and checks every constraint.
    pub fn tell_metrics(&mut self, id: u64, metrics: &BTreeMap<String, f64>) -> Result<TellReport, SearchError> {
        let (config, _) = self.pending.get(&id).ok_or(SearchError::UnknownProposal(id))?;
        let metric = &self.problem.objective.metric;
        let failure = match metrics.get(metric) {
            None => Some(format!("objective metric `{metric}` missing")),
            Some(v) if !v.is_finite() => Some(format!("non-finite objective {v}")),
            Some(_) => match self.problem.check_constraints(config, metrics) {
                Ok(violations) if violations.is_empty() => None,
                Ok(violations) => Some(
                    violations
                        .iter()
                        .map(|v| format!("constraint `{}` violated ({})", v.constraint, v.value))
                        .collect::<Vec<_>>()
                        .join("; "),
                ),
                Err(e) => Some(e.to_string()),
            },
        };
        match failure {
            None => self.record(id, metrics.get(metric).copied(), None),
            Some(f) => self.record(id, None, Some(f)),
        }
    }

    pub fn tell_failure(&mut self, id: u64, reason: &str) -> Result<TellReport, SearchError> {
        self.record(id, None, Some(reason.to_string()))
    }

    fn best_loss(&self) -> Option<f64> {
        self.best().map(|o| o.loss)
    }

    /// Loss assigned to failures: the worst loss plus three times the
    /// observed range (or the worst magnitude when all losses are equal).
    pub fn penalty(&self) -> f64 {
        penalty(self.told.iter().filter(|o| o.succeeded()).map(|o| o.loss))
    }

    fn record(&mut self, id: u64, objective: Option<f64>, failure: Option<String>) -> Result<TellReport, SearchError> {
        let (config, phase) = self.pending.remove(&id).ok_or(SearchError::UnknownProposal(id))?;
        let sign = self.problem.objective.direction.sign();
        let loss = match objective {
            Some(v) => sign * v,
            None => self.penalty(),
        };
        let mut improved = false;
        if objective.is_some() {
            match self.best() {
                None => {
                    improved = true;
                    self.best = Some(self.told.len());
                }
                Some(b) => {
                    let gain = b.loss - loss;
                    let threshold = self.settings.epsilon * b.loss.abs();
                    improved = gain > 0.0 && gain >= threshold;
                    if gain > 0.0 {
                        self.best = Some(self.told.len());
                    }
                }
            }
        }
        self.stall = if improved { 0 } else { self.stall + 1 };
        self.told.push(Observation {
            id,
            config: config.clone(),
            phase,
            objective,
            loss,
            failure,
        });
        self.update_algorithm(id, config, phase, loss);
        Ok(TellReport {
            loss,
            improved,
            failed: objective.is_none(),
        })
    }

    fn update_algorithm(&mut self, id: u64, config: Configuration, phase: Phase, loss: f64) {
        let seed = self.settings.seed;
        let cooling = self.settings.annealing.cooling;
        let n_initial = self.initial.len();
        let initial_done = self.told.iter().filter(|o| o.phase == Phase::Initial).count() == n_initial;
        match &mut self.algo {
            AlgoState::Bo => {}
            AlgoState::Anneal(state) => match (&state.current, phase) {
                (None, _) => state.current = Some((config, loss)),
                (Some((_, current)), Phase::Initial) => {
                    if loss < *current {
                        state.current = Some((config, loss));
                    }
                }
                (Some((_, current)), Phase::Guided) => {
                    let p = acceptance_probability(loss - current, state.temperature);
                    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[seed, stream::ANNEALING, id, 1]));
                    if p >= 1.0 || rng.random::<f64>() < p {
                        state.current = Some((config, loss));
                    }
                    state.temperature *= cooling;
                }
            },
            AlgoState::Evolution(state) => {
                if phase == Phase::Initial {
                    if initial_done {
                        let mut initial: Vec<&Observation> =
                            self.told.iter().filter(|o| o.phase == Phase::Initial).collect();
                        initial.sort_by_key(|o| o.id);
                        state.population = initial.iter().map(|o| (o.config.clone(), o.loss)).collect();
                    }
                    return;
                }
                let Some(member) = state.members.remove(&id) else {
                    return;
                };
                state.results.insert(member, (config, loss));
                if state.results.len() == state.trials.len() {
                    for (member, (config, loss)) in std::mem::take(&mut state.results) {
                        if loss <= state.population[member].1 {
                            state.population[member] = (config, loss);
                        }
                    }
                    state.trials.clear();
                    state.issued = 0;
                    state.generation += 1;
                }
            }
        }
    }

    /// Surrogate fitted on every told point, refitted only when new points
    /// arrived. `None` for non-surrogate algorithms or fewer than two points.
    pub fn current_model(&mut self) -> Result<Option<&EnsembleModel>, SearchError> {
        if !matches!(self.algo, AlgoState::Bo) || self.told.len() < 2 {
            return Ok(None);
        }
        if self.model.as_ref().is_none_or(|(n, _)| *n != self.told.len()) {
            let data = self.dataset()?;
            let model = fit(&data, &self.settings.ensemble_params())?;
            self.model = Some((self.told.len(), model));
        }
        Ok(self.model.as_ref().map(|(_, m)| m))
    }

    /// Told points as surrogate rows, with failures at the current penalty.
    pub fn dataset(&self) -> Result<Dataset, SearchError> {
        let penalty = self.penalty();
        let arity = self.problem.space().arity();
        let rows = self
            .told
            .iter()
            .map(|o| (o.config.values().to_vec(), if o.succeeded() { o.loss } else { penalty }));
        Ok(Dataset::from_rows(arity, rows)?)
    }

    /// JSON snapshot of the algorithm's internal state: the fitted surrogate,
    /// the annealing chain or the evolving population.
    pub fn checkpoint(&mut self) -> Result<Option<String>, SearchError> {
        if matches!(self.algo, AlgoState::Bo) {
            return Ok(self.current_model()?.map(|m| m.to_json()));
        }
        let value = match &self.algo {
            AlgoState::Anneal(s) => serde_json::json!({
                "algorithm": Algorithm::SimulatedAnnealing.name(),
                "temperature": s.temperature,
                "current": s.current.as_ref().map(|(c, l)| serde_json::json!({"config": c, "loss": l})),
            }),
            AlgoState::Evolution(s) => serde_json::json!({
                "algorithm": Algorithm::DifferentialEvolution.name(),
                "generation": s.generation,
                "population": s.population.iter().map(|(c, l)| serde_json::json!({"config": c, "loss": l})).collect::<Vec<_>>(),
            }),
            AlgoState::Bo => unreachable!(),
        };
        Ok(Some(value.to_string()))
    }
}

pub(crate) fn penalty(losses: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = losses.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| (lo.min(l), hi.max(l)));
    if hi == f64::NEG_INFINITY {
        return 0.0;
    }
    let range = hi - lo;
    let span = if range > 0.0 { range } else { hi.abs().max(1.0) };
    hi + 3.0 * span
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn feasible_draw(problem: &ProblemSpec, rng: &mut ChaCha8Rng) -> Result<Configuration, SearchError> {
    for _ in 0..FEASIBLE_DRAWS {
        let p = random_point(problem.space(), rng);
        if problem.feasible_before_evaluation(&p) {
            return Ok(p);
        }
    }
    Err(SearchError::NoFeasiblePoint)
}
