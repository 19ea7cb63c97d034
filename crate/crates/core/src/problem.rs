//! Decision variables, objective and constraints of an optimization problem.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Integer,
    Real,
}

/// A bounded decision variable. Bounds are closed: `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawVariable")]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariable {
    name: String,
    kind: VarKind,
    lower: f64,
    upper: f64,
}

impl TryFrom<RawVariable> for Variable {
    type Error = ProblemError;

    fn try_from(raw: RawVariable) -> Result<Self, Self::Error> {
        Variable::new(&raw.name, raw.kind, raw.lower, raw.upper)
    }
}

impl Variable {
    pub fn new(name: &str, kind: VarKind, lower: f64, upper: f64) -> Result<Self, ProblemError> {
        if !is_identifier(name) {
            return Err(ProblemError::InvalidName(name.to_string()));
        }
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(ProblemError::BoundInversion {
                name: name.to_string(),
                lower,
                upper,
            });
        }
        if kind == VarKind::Integer && (lower.fract() != 0.0 || upper.fract() != 0.0) {
            return Err(ProblemError::FractionalIntegerBound(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            kind,
            lower,
            upper,
        })
    }

    pub fn integer(name: &str, lower: i64, upper: i64) -> Result<Self, ProblemError> {
        Self::new(name, VarKind::Integer, lower as f64, upper as f64)
    }

    pub fn real(name: &str, lower: f64, upper: f64) -> Result<Self, ProblemError> {
        Self::new(name, VarKind::Real, lower, upper)
    }

    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower && value <= self.upper && (self.kind == VarKind::Real || value.fract() == 0.0)
    }

    /// Clamps into bounds and rounds integers to nearest (ties away from zero).
    pub fn snap(&self, value: f64) -> f64 {
        let v = value.clamp(self.lower, self.upper);
        match self.kind {
            VarKind::Real => v,
            VarKind::Integer => v.round().clamp(self.lower, self.upper),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Ordered, non-empty list of uniquely named variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Variable>", into = "Vec<Variable>")]
pub struct SearchSpace {
    variables: Vec<Variable>,
}

impl TryFrom<Vec<Variable>> for SearchSpace {
    type Error = ProblemError;

    fn try_from(variables: Vec<Variable>) -> Result<Self, Self::Error> {
        SearchSpace::new(variables)
    }
}

impl From<SearchSpace> for Vec<Variable> {
    fn from(space: SearchSpace) -> Self {
        space.variables
    }
}

impl SearchSpace {
    pub fn new(variables: Vec<Variable>) -> Result<Self, ProblemError> {
        if variables.is_empty() {
            return Err(ProblemError::EmptySpace);
        }
        let mut seen = BTreeSet::new();
        for v in &variables {
            if !seen.insert(v.name.as_str()) {
                return Err(ProblemError::DuplicateVariable(v.name.clone()));
            }
        }
        Ok(Self { variables })
    }

    pub fn arity(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn is_integer(&self) -> bool {
        self.variables.iter().all(|v| v.kind == VarKind::Integer)
    }

    /// Checks arity, bounds and integrality of `point`.
    pub fn validate(&self, point: &Configuration) -> Result<(), ProblemError> {
        if point.len() != self.arity() {
            return Err(ProblemError::ArityMismatch {
                expected: self.arity(),
                got: point.len(),
            });
        }
        let violations: Vec<BoundViolation> = self
            .variables
            .iter()
            .zip(point.values())
            .filter(|(var, &x)| !var.contains(x))
            .map(|(var, &x)| BoundViolation {
                variable: var.name.clone(),
                value: x,
                lower: var.lower,
                upper: var.upper,
                integrality: var.kind == VarKind::Integer && x.fract() != 0.0,
            })
            .collect();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ProblemError::Bounds(violations))
        }
    }

    /// Maps `point` into the unit hypercube.
    pub fn normalize(&self, point: &Configuration) -> Vec<f64> {
        self.variables
            .iter()
            .zip(point.values())
            .map(|(v, &x)| (x - v.lower) / v.range())
            .collect()
    }

    /// Builds an in-bounds configuration from unit-cube coordinates.
    pub fn from_unit(&self, unit: &[f64]) -> Configuration {
        Configuration::new(
            self.variables
                .iter()
                .zip(unit)
                .map(|(v, &u)| v.snap(v.lower + u * v.range()))
                .collect(),
        )
    }

    /// Clamps and rounds every component.
    pub fn snap(&self, values: &[f64]) -> Configuration {
        Configuration::new(self.variables.iter().zip(values).map(|(v, &x)| v.snap(x)).collect())
    }

    pub fn named(&self, point: &Configuration) -> BTreeMap<String, f64> {
        self.variables
            .iter()
            .zip(point.values())
            .map(|(v, &x)| (v.name.clone(), x))
            .collect()
    }

    /// Builds a configuration from `name → value`; every variable must be present.
    pub fn from_named(&self, values: &BTreeMap<String, f64>) -> Result<Configuration, ProblemError> {
        for name in values.keys() {
            if self.index_of(name).is_none() {
                return Err(ProblemError::UnknownVariable(name.clone()));
            }
        }
        let point = self
            .variables
            .iter()
            .map(|v| {
                values
                    .get(&v.name)
                    .copied()
                    .ok_or_else(|| ProblemError::MissingVariable(v.name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let point = Configuration::new(point);
        self.validate(&point)?;
        Ok(point)
    }

    pub fn format(&self, point: &Configuration) -> String {
        self.variables
            .iter()
            .zip(point.values())
            .map(|(v, x)| format!("{}={}", v.name, x))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One value per search-space variable, in space order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(Vec<f64>);

impl Configuration {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Configuration {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundViolation {
    pub variable: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// The value is within bounds but not whole.
    pub integrality: bool,
}

impl fmt::Display for BoundViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.integrality {
            write!(f, "{}={} is not a whole number", self.variable, self.value)
        } else {
            write!(
                f,
                "{}={} outside [{}, {}]",
                self.variable, self.value, self.lower, self.upper
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// Multiplier turning an objective value into a loss to minimize.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Minimize => 1.0,
            Direction::Maximize => -1.0,
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Minimize => a < b,
            Direction::Maximize => a > b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    /// Key into a trial's metrics map.
    pub metric: String,
    pub direction: Direction,
}

/// `constant + Σ coefficient · value(name)`, where a name is either a variable
/// or a metric. Variables shadow metrics of the same name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineExpr {
    #[serde(default)]
    pub terms: BTreeMap<String, f64>,
    #[serde(default)]
    pub constant: f64,
}

impl AffineExpr {
    pub fn new(terms: &[(&str, f64)], constant: f64) -> Self {
        Self {
            terms: terms.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
            constant,
        }
    }

    pub fn eval(
        &self,
        space: &SearchSpace,
        point: &Configuration,
        metrics: &BTreeMap<String, f64>,
    ) -> Result<f64, ProblemError> {
        let mut acc = self.constant;
        for (name, coef) in &self.terms {
            let value = match space.index_of(name) {
                Some(i) => point.get(i),
                None => *metrics
                    .get(name)
                    .ok_or_else(|| ProblemError::UnknownMetric(name.clone()))?,
            };
            acc += coef * value;
        }
        Ok(acc)
    }

    /// True when every referenced name is a variable of `space`.
    pub fn only_variables(&self, space: &SearchSpace) -> bool {
        self.terms.keys().all(|n| space.index_of(n).is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Feasible iff `expression <= 0`.
    Inequality,
    /// Feasible iff `|expression| <= tolerance`.
    Equality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawConstraint")]
pub struct Constraint {
    pub name: String,
    pub kind: ConstraintKind,
    pub expression: AffineExpr,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub tolerance: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraint {
    #[serde(default)]
    name: Option<String>,
    kind: ConstraintKind,
    expression: AffineExpr,
    #[serde(default)]
    tolerance: f64,
}

impl TryFrom<RawConstraint> for Constraint {
    type Error = ProblemError;

    fn try_from(raw: RawConstraint) -> Result<Self, Self::Error> {
        let name = raw.name.unwrap_or_else(|| describe(&raw.expression));
        Constraint::new(&name, raw.kind, raw.expression, raw.tolerance)
    }
}

fn describe(expr: &AffineExpr) -> String {
    let mut s = String::new();
    for (name, coef) in &expr.terms {
        if !s.is_empty() {
            s.push_str(" + ");
        }
        s.push_str(&format!("{coef}*{name}"));
    }
    format!("{s} + {}", expr.constant)
}

impl Constraint {
    pub fn new(name: &str, kind: ConstraintKind, expression: AffineExpr, tolerance: f64) -> Result<Self, ProblemError> {
        let bad = |why: &str| ProblemError::InvalidConstraint {
            name: name.to_string(),
            reason: why.to_string(),
        };
        if !(tolerance.is_finite() && tolerance >= 0.0) {
            return Err(bad("tolerance must be a finite number >= 0"));
        }
        match kind {
            ConstraintKind::Equality if tolerance <= 0.0 => {
                return Err(bad("equality constraints need a tolerance > 0"))
            }
            ConstraintKind::Inequality if tolerance != 0.0 => {
                return Err(bad("tolerance applies to equality constraints only"))
            }
            _ => {}
        }
        if !expression.constant.is_finite() || expression.terms.values().any(|c| !c.is_finite()) {
            return Err(bad("coefficients must be finite"));
        }
        Ok(Self {
            name: name.to_string(),
            kind,
            expression,
            tolerance,
        })
    }

    pub fn inequality(name: &str, expression: AffineExpr) -> Self {
        Self::new(name, ConstraintKind::Inequality, expression, 0.0).expect("inequality with finite coefficients")
    }

    pub fn equality(name: &str, expression: AffineExpr, tolerance: f64) -> Result<Self, ProblemError> {
        Self::new(name, ConstraintKind::Equality, expression, tolerance)
    }

    pub fn is_satisfied_by(&self, value: f64) -> bool {
        match self.kind {
            ConstraintKind::Inequality => value <= 0.0,
            ConstraintKind::Equality => value.abs() <= self.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintViolation {
    pub constraint: String,
    pub value: f64,
}

/// Variables, single objective and constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub variables: SearchSpace,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

impl ProblemSpec {
    pub fn new(space: SearchSpace, objective: ObjectiveSpec, constraints: Vec<Constraint>) -> Self {
        Self {
            variables: space,
            objective,
            constraints,
        }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.variables
    }

    /// Evaluates every constraint; an empty list means feasible.
    pub fn check_constraints(
        &self,
        point: &Configuration,
        metrics: &BTreeMap<String, f64>,
    ) -> Result<Vec<ConstraintViolation>, ProblemError> {
        self.variables.validate(point)?;
        let mut violated = Vec::new();
        for c in &self.constraints {
            let value = c.expression.eval(&self.variables, point, metrics)?;
            if !c.is_satisfied_by(value) {
                violated.push(ConstraintViolation {
                    constraint: c.name.clone(),
                    value,
                });
            }
        }
        Ok(violated)
    }

    /// Checks only constraints that depend on variables alone; metric
    /// constraints are skipped.
    pub fn feasible_before_evaluation(&self, point: &Configuration) -> bool {
        let empty = BTreeMap::new();
        self.constraints
            .iter()
            .filter(|c| c.expression.only_variables(&self.variables))
            .all(|c| {
                c.expression
                    .eval(&self.variables, point, &empty)
                    .map(|v| c.is_satisfied_by(v))
                    .unwrap_or(false)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("`{0}` is not a valid identifier")]
    InvalidName(String),
    #[error("bound inversion: variable `{name}` needs lower < upper, got [{lower}, {upper}]")]
    BoundInversion { name: String, lower: f64, upper: f64 },
    #[error("invalid value: integer variable `{0}` must have whole-number bounds")]
    FractionalIntegerBound(String),
    #[error("duplicate variable: `{0}` is declared more than once")]
    DuplicateVariable(String),
    #[error("invalid value: the search space needs at least one variable")]
    EmptySpace,
    #[error("configuration has {got} values, search space has {expected} variables")]
    ArityMismatch { expected: usize, got: usize },
    #[error("configuration out of bounds: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Bounds(Vec<BoundViolation>),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{0}` has no value")]
    MissingVariable(String),
    #[error("invalid value: constraint `{name}`: {reason}")]
    InvalidConstraint { name: String, reason: String },
}

impl ProblemError {
    pub fn violations(&self) -> Option<&[BoundViolation]> {
        match self {
            ProblemError::Bounds(v) => Some(v),
            _ => None,
        }
    }
}
