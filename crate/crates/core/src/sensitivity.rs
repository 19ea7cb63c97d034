//! One-at-a-time sensitivity analysis around a base configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{Configuration, Direction, ProblemError, SearchSpace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensitivityError {
    #[error("sensitivity plan names unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("offset {offset} moves `{variable}` to {value}, outside [{lower}, {upper}]")]
    OutOfBounds {
        variable: String,
        offset: f64,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("offset {offset} of integer variable `{variable}` is not a whole number")]
    FractionalOffset { variable: String, offset: f64 },
    #[error("offset {offset} is listed twice for `{variable}`")]
    DuplicateOffset { variable: String, offset: f64 },
    #[error("sensitivity repeats must be >= 1")]
    NoRepeats,
    #[error("base configuration: {0}")]
    Base(#[from] ProblemError),
    #[error("results contain no base row")]
    MissingBase,
}

/// The optional `sensitivity` section of a problem document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySection {
    /// Base configuration by variable name; the CLI falls back to the best
    /// point of an archived run or to the document's baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub deltas: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OatPlan {
    pub base: Configuration,
    pub deltas: BTreeMap<String, Vec<f64>>,
    pub repeats: usize,
}

/// One configuration of an expanded plan. `variable` is `None` for the base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OatPoint {
    pub variable: Option<String>,
    pub offset: f64,
    pub config: Configuration,
}

impl OatPlan {
    pub fn validate(&self, space: &SearchSpace) -> Result<(), SensitivityError> {
        if self.repeats == 0 {
            return Err(SensitivityError::NoRepeats);
        }
        space.validate(&self.base)?;
        for (name, offsets) in &self.deltas {
            let i = space
                .index_of(name)
                .ok_or_else(|| SensitivityError::UnknownVariable(name.clone()))?;
            let var = &space.variables()[i];
            for (k, &offset) in offsets.iter().enumerate() {
                if offsets[..k].contains(&offset) {
                    return Err(SensitivityError::DuplicateOffset {
                        variable: name.clone(),
                        offset,
                    });
                }
                let value = self.base.get(i) + offset;
                if var.kind == crate::problem::VarKind::Integer && offset.fract() != 0.0 {
                    return Err(SensitivityError::FractionalOffset {
                        variable: name.clone(),
                        offset,
                    });
                }
                if !(value >= var.lower && value <= var.upper) {
                    return Err(SensitivityError::OutOfBounds {
                        variable: name.clone(),
                        offset,
                        value,
                        lower: var.lower,
                        upper: var.upper,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Base first, then each variable in space order with its non-zero offsets
/// ascending.
pub fn expand(plan: &OatPlan, space: &SearchSpace) -> Result<Vec<OatPoint>, SensitivityError> {
    plan.validate(space)?;
    let mut out = vec![OatPoint {
        variable: None,
        offset: 0.0,
        config: plan.base.clone(),
    }];
    for (i, var) in space.variables().iter().enumerate() {
        let Some(offsets) = plan.deltas.get(&var.name) else {
            continue;
        };
        let mut offsets: Vec<f64> = offsets.iter().copied().filter(|&o| o != 0.0).collect();
        offsets.sort_by(f64::total_cmp);
        for offset in offsets {
            let mut values = plan.base.values().to_vec();
            values[i] += offset;
            out.push(OatPoint {
                variable: Some(var.name.clone()),
                offset,
                config: Configuration::new(values),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub value: f64,
    /// `value - base`.
    pub delta: f64,
    /// `delta / |base|`; `None` when the base value is 0.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    /// `None` for the base row.
    pub variable: Option<String>,
    pub offset: f64,
    pub config: Configuration,
    pub effects: BTreeMap<String, Effect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOffset {
    pub offset: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub objective: String,
    pub direction: Direction,
    pub base: BTreeMap<String, f64>,
    pub rows: Vec<EffectRow>,
    /// Best offset per variable under the objective, the base counting as 0.
    pub best: BTreeMap<String, BestOffset>,
}

/// Effects of every row relative to the base row.
pub fn analyze(
    results: &[(OatPoint, BTreeMap<String, f64>)],
    objective: &str,
    direction: Direction,
) -> Result<EffectTable, SensitivityError> {
    let (_, base) = results
        .iter()
        .find(|(p, _)| p.variable.is_none())
        .ok_or(SensitivityError::MissingBase)?;
    let rows: Vec<EffectRow> = results
        .iter()
        .map(|(p, metrics)| EffectRow {
            variable: p.variable.clone(),
            offset: p.offset,
            config: p.config.clone(),
            effects: metrics
                .iter()
                .filter_map(|(name, &value)| {
                    let b = *base.get(name)?;
                    let delta = value - b;
                    let relative = (b != 0.0).then(|| delta / b.abs());
                    Some((name.clone(), Effect { value, delta, relative }))
                })
                .collect(),
        })
        .collect();

    let mut best: BTreeMap<String, BestOffset> = BTreeMap::new();
    let base_value = base.get(objective).copied();
    for row in &rows {
        let (Some(var), Some(value)) = (&row.variable, row.effects.get(objective).map(|e| e.value)) else {
            continue;
        };
        let candidate = BestOffset {
            offset: row.offset,
            value,
        };
        let entry = best.entry(var.clone()).or_insert_with(|| match base_value {
            Some(b) => BestOffset { offset: 0.0, value: b },
            None => candidate.clone(),
        });
        if preferred(direction, (row.offset, value), (entry.offset, entry.value)) {
            *entry = candidate;
        }
    }
    Ok(EffectTable {
        objective: objective.to_string(),
        direction,
        base: base.clone(),
        rows,
        best,
    })
}

/// Better value wins; on ties the offset closer to 0, then the negative one.
fn preferred(direction: Direction, a: (f64, f64), b: (f64, f64)) -> bool {
    if direction.better(a.1, b.1) {
        return true;
    }
    if a.1 != b.1 {
        return false;
    }
    let (da, db) = (a.0.abs(), b.0.abs());
    da < db || (da == db && a.0 < b.0)
}

impl EffectTable {
    /// Long format: `variable,offset,metric,value,delta,relative`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,offset,metric,value,delta,relative\n");
        for row in &self.rows {
            let var = row.variable.as_deref().unwrap_or("base");
            for (metric, e) in &row.effects {
                let rel = e.relative.map(|r| r.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{var},{},{metric},{},{},{rel}", row.offset, e.value, e.delta);
            }
        }
        out
    }

    pub fn to_text(&self, space: &SearchSpace) -> String {
        let mut out = String::new();
        let base = self.base.get(&self.objective).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "objective: {} ({:?}), base = {base}",
            self.objective, self.direction
        );
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:<28} {:>14} {:>10}",
            "variable", "offset", "configuration", self.objective, "change"
        );
        for row in &self.rows {
            let Some(e) = row.effects.get(&self.objective) else {
                continue;
            };
            let change = e
                .relative
                .map(|r| format!("{:+.1}%", 100.0 * r))
                .unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:<28} {:>14.4} {:>10}",
                row.variable.as_deref().unwrap_or("base"),
                row.offset,
                row.config.to_string(),
                e.value,
                change
            );
        }
        for var in space.variables() {
            if let Some(b) = self.best.get(&var.name) {
                let _ = writeln!(out, "best offset for {}: {:+} ({})", var.name, b.offset, b.value);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Variable;

    fn space() -> SearchSpace {
        SearchSpace::new(vec![
            Variable::integer("http", 20, 60).unwrap(),
            Variable::integer("download", 20, 60).unwrap(),
            Variable::integer("extract", 3, 9).unwrap(),
            Variable::integer("simsearch", 20, 60).unwrap(),
        ])
        .unwrap()
    }

    fn plan(deltas: &[(&str, &[f64])]) -> OatPlan {
        OatPlan {
            base: Configuration::new(vec![54.0, 54.0, 7.0, 53.0]),
            deltas: deltas.iter().map(|(n, o)| (n.to_string(), o.to_vec())).collect(),
            repeats: 1,
        }
    }

    fn values_of(points: &[OatPoint], var: &str, i: usize) -> Vec<f64> {
        points
            .iter()
            .filter(|p| p.variable.as_deref() == Some(var))
            .map(|p| p.config.get(i))
            .collect()
    }

    #[test]
    fn extract_plus_minus_two() {
        let pts = expand(&plan(&[("extract", &[-2.0, -1.0, 0.0, 1.0, 2.0])]), &space()).unwrap();
        assert_eq!(pts.len(), 5);
        assert!(pts[0].variable.is_none());
        let mut all = vec![pts[0].config.get(2)];
        all.extend(values_of(&pts, "extract", 2));
        all.sort_by(f64::total_cmp);
        assert_eq!(all, [5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn empty_plan_is_just_the_base() {
        let pts = expand(&plan(&[]), &space()).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].config, Configuration::new(vec![54.0, 54.0, 7.0, 53.0]));
    }

    #[test]
    fn simsearch_plus_minus_three() {
        let offsets = [3.0, 2.0, 1.0, -1.0, -2.0, -3.0];
        let pts = expand(&plan(&[("simsearch", &offsets)]), &space()).unwrap();
        assert_eq!(values_of(&pts, "simsearch", 3), [50.0, 51.0, 52.0, 54.0, 55.0, 56.0]);
    }

    #[test]
    fn order_follows_the_space() {
        let pts = expand(&plan(&[("simsearch", &[1.0]), ("extract", &[1.0, -1.0])]), &space()).unwrap();
        let order: Vec<_> = pts.iter().map(|p| (p.variable.clone(), p.offset)).collect();
        assert_eq!(
            order,
            [
                (None, 0.0),
                (Some("extract".into()), -1.0),
                (Some("extract".into()), 1.0),
                (Some("simsearch".into()), 1.0)
            ]
        );
    }

    #[test]
    fn invalid_plans_name_the_problem() {
        let err = expand(&plan(&[("extract", &[3.0])]), &space()).unwrap_err();
        assert!(
            matches!(err, SensitivityError::OutOfBounds { ref variable, offset, .. } if variable == "extract" && offset == 3.0)
        );
        assert!(matches!(
            expand(&plan(&[("gpu", &[1.0])]), &space()),
            Err(SensitivityError::UnknownVariable(_))
        ));
        assert!(matches!(
            expand(&plan(&[("extract", &[0.5])]), &space()),
            Err(SensitivityError::FractionalOffset { .. })
        ));
    }

    fn row(var: Option<&str>, offset: f64, rt: f64) -> (OatPoint, BTreeMap<String, f64>) {
        (
            OatPoint {
                variable: var.map(String::from),
                offset,
                config: Configuration::new(vec![offset]),
            },
            BTreeMap::from([("response_time_mean".to_string(), rt)]),
        )
    }

    #[test]
    fn six_extract_threads_cut_the_response_time() {
        let base = 2.484;
        let six = 2.484 * 0.915;
        let t = analyze(
            &[row(None, 0.0, base), row(Some("extract"), -1.0, six)],
            "response_time_mean",
            Direction::Minimize,
        )
        .unwrap();
        let rel = t.rows[1].effects["response_time_mean"].relative.unwrap();
        assert!((rel - -0.085).abs() < 1e-12);
        assert_eq!(format!("{:.1}", 100.0 * rel), "-8.5");
        assert_eq!(t.best["extract"].offset, -1.0);
    }

    #[test]
    fn flat_results_keep_the_base() {
        let t = analyze(
            &[row(None, 0.0, 1.0), row(Some("x"), -1.0, 1.0), row(Some("x"), 1.0, 1.0)],
            "response_time_mean",
            Direction::Minimize,
        )
        .unwrap();
        assert!(t.rows.iter().all(|r| r.effects["response_time_mean"].delta == 0.0));
        assert_eq!(t.best["x"].offset, 0.0);
    }

    #[test]
    fn monotone_metric_picks_the_extreme() {
        let rows: Vec<_> = std::iter::once(row(None, 0.0, 0.0))
            .chain([-2.0, -1.0, 1.0, 2.0].map(|o| row(Some("x"), o, o)))
            .collect();
        let t = analyze(&rows, "response_time_mean", Direction::Minimize).unwrap();
        assert_eq!(t.best["x"].offset, -2.0);
        let t = analyze(&rows, "response_time_mean", Direction::Maximize).unwrap();
        assert_eq!(t.best["x"].offset, 2.0);
    }

    #[test]
    fn ties_prefer_small_then_negative_offsets() {
        let rows = [
            row(None, 0.0, 5.0),
            row(Some("x"), -2.0, 1.0),
            row(Some("x"), 2.0, 1.0),
            row(Some("x"), 1.0, 3.0),
        ];
        let t = analyze(&rows, "response_time_mean", Direction::Minimize).unwrap();
        assert_eq!(t.best["x"].offset, -2.0);
    }

    #[test]
    fn missing_base_is_an_error() {
        assert_eq!(
            analyze(&[row(Some("x"), 1.0, 1.0)], "response_time_mean", Direction::Minimize),
            Err(SensitivityError::MissingBase)
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn expansion_size(extract in proptest::sample::subsequence(vec![-2.0, -1.0, 0.0, 1.0, 2.0], 0..5),
                              simsearch in proptest::sample::subsequence(vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0], 0..7)) {
                let nonzero = extract.iter().chain(&simsearch).filter(|&&o| o != 0.0).count();
                let pts = expand(&plan(&[("extract", &extract), ("simsearch", &simsearch)]), &space()).unwrap();
                prop_assert_eq!(pts.len(), 1 + nonzero);
            }

            #[test]
            fn relative_changes_ignore_scale(values in proptest::collection::vec(0.1f64..10.0, 3), scale in 0.01f64..100.0) {
                let rows: Vec<_> = values.iter().enumerate().map(|(i, &v)| row(if i == 0 { None } else { Some("x") }, i as f64, v)).collect();
                let scaled: Vec<_> = values.iter().enumerate().map(|(i, &v)| row(if i == 0 { None } else { Some("x") }, i as f64, v * scale)).collect();
                let a = analyze(&rows, "response_time_mean", Direction::Minimize).unwrap();
                let b = analyze(&scaled, "response_time_mean", Direction::Minimize).unwrap();
                for (ra, rb) in a.rows.iter().zip(&b.rows) {
                    let (x, y) = (ra.effects["response_time_mean"].relative.unwrap(), rb.effects["response_time_mean"].relative.unwrap());
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }
    }
}
