//! The problem document: a JSON file declaring variables, objective,
//! constraints, search settings and the executor.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{Configuration, Constraint, ObjectiveSpec, ProblemSpec, SearchSpace, VarKind};
use crate::runner::{ExecutorKind, ExecutorSpec, POOL_VARIABLES};
use crate::search::SearchSettings;
use crate::sensitivity::SensitivitySection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    pub variables: SearchSpace,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    #[serde(default)]
    pub search: SearchSettings,
    #[serde(default)]
    pub executor: ExecutorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivitySection>,
    /// Reference configuration evaluated alongside the search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    Syntax,
    MissingField,
    UnknownKey,
    BoundInversion,
    DuplicateVariable,
    InvalidValue,
    Io,
}

/// A rejected document, with the position serde reported when there is one.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub message: String,
    /// 1-based line and column.
    pub position: Option<(usize, usize)>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.position {
            Some((line, col)) => write!(f, "line {line}, column {col}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl Diagnostic {
    fn semantic(message: String) -> Self {
        Self {
            kind: DiagnosticKind::InvalidValue,
            message,
            position: None,
        }
    }

    fn from_json(e: serde_json::Error) -> Self {
        let full = e.to_string();
        let message = match full.rfind(" at line ") {
            Some(i) => full[..i].to_string(),
            None => full,
        };
        let kind = match e.classify() {
            serde_json::error::Category::Syntax | serde_json::error::Category::Eof => DiagnosticKind::Syntax,
            serde_json::error::Category::Io => DiagnosticKind::Io,
            serde_json::error::Category::Data if message.starts_with("missing field") => DiagnosticKind::MissingField,
            serde_json::error::Category::Data if message.starts_with("unknown field") => DiagnosticKind::UnknownKey,
            serde_json::error::Category::Data if message.starts_with("bound inversion") => {
                DiagnosticKind::BoundInversion
            }
            serde_json::error::Category::Data if message.starts_with("duplicate variable") => {
                DiagnosticKind::DuplicateVariable
            }
            serde_json::error::Category::Data => DiagnosticKind::InvalidValue,
        };
        let position = (e.line() > 0).then(|| (e.line(), e.column()));
        Self {
            kind,
            message,
            position,
        }
    }
}

/// Parses and validates a document.
pub fn parse_document(text: &str) -> Result<ProblemDocument, Diagnostic> {
    let doc: ProblemDocument = serde_json::from_str(text).map_err(Diagnostic::from_json)?;
    doc.validate()?;
    Ok(doc)
}

pub fn load_document(path: &Path) -> Result<ProblemDocument, Diagnostic> {
    let text = std::fs::read_to_string(path).map_err(|e| Diagnostic {
        kind: DiagnosticKind::Io,
        message: format!("{}: {e}", path.display()),
        position: None,
    })?;
    parse_document(&text)
}

/// Parses only the problem part; other sections are ignored.
pub fn parse_problem(text: &str) -> Result<ProblemSpec, Diagnostic> {
    parse_document(text).map(|d| d.problem())
}

impl ProblemDocument {
    pub fn problem(&self) -> ProblemSpec {
        ProblemSpec::new(self.variables.clone(), self.objective.clone(), self.constraints.clone())
    }

    /// Pretty JSON that parses back to an equal document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }

    pub fn baseline_config(&self) -> Result<Option<Configuration>, Diagnostic> {
        self.baseline
            .as_ref()
            .map(|b| {
                self.variables
                    .from_named(b)
                    .map_err(|e| Diagnostic::semantic(format!("baseline: {e}")))
            })
            .transpose()
    }

    /// Cross-section checks that serde cannot express.
    pub fn validate(&self) -> Result<(), Diagnostic> {
        self.search
            .resolve(&self.variables)
            .map_err(|e| Diagnostic::semantic(format!("search: {e}")))?;
        self.executor.validate().map_err(Diagnostic::semantic)?;
        if self.executor.kind == ExecutorKind::Simulator {
            for name in POOL_VARIABLES {
                match self.variables.index_of(name) {
                    Some(i) if self.variables.variables()[i].kind == VarKind::Integer => {}
                    _ => {
                        return Err(Diagnostic::semantic(format!(
                            "the simulator executor needs an integer variable `{name}`"
                        )))
                    }
                }
                if self.variables.variables()[self.variables.index_of(name).unwrap()].lower < 1.0 {
                    return Err(Diagnostic::semantic(format!("pool `{name}` needs a lower bound >= 1")));
                }
            }
            if self.variables.arity() != POOL_VARIABLES.len() {
                return Err(Diagnostic::semantic(format!(
                    "the simulator executor takes exactly the variables {}",
                    POOL_VARIABLES.join(", ")
                )));
            }
        }
        self.baseline_config()?;
        if let Some(s) = &self.sensitivity {
            if let Some(base) = &s.base {
                self.variables
                    .from_named(base)
                    .map_err(|e| Diagnostic::semantic(format!("sensitivity.base: {e}")))?;
            }
            for name in s.deltas.keys() {
                if self.variables.index_of(name).is_none() {
                    return Err(Diagnostic::semantic(format!(
                        "sensitivity plan names unknown variable `{name}`"
                    )));
                }
            }
            if s.repeats == Some(0) {
                return Err(Diagnostic::semantic("sensitivity.repeats must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "variables": [
    {"name": "x", "kind": "real", "lower": 0, "upper": 1},
    {"name": "n", "kind": "integer", "lower": 1, "upper": 5}
  ],
  "objective": {"metric": "y", "direction": "minimize"},
  "executor": {"kind": "external_command", "command": {"template": "true"}}
}"#;

    #[test]
    fn minimal_document_parses() {
        let doc = parse_document(MINIMAL).unwrap();
        assert_eq!(doc.variables.arity(), 2);
        assert_eq!(doc.search, SearchSettings::default());
    }

    #[test]
    fn round_trip() {
        let doc = parse_document(MINIMAL).unwrap();
        assert_eq!(parse_document(&doc.to_json()).unwrap(), doc);
    }

    #[test]
    fn degenerate_bounds_are_reported_with_position() {
        let text = MINIMAL.replace(r#""lower": 0, "upper": 1"#, r#""lower": 1, "upper": 1"#);
        let d = parse_document(&text).unwrap_err();
        assert_eq!(d.kind, DiagnosticKind::BoundInversion);
        let (line, _) = d.position.unwrap();
        assert!((3..=4).contains(&line), "{d:?}");
    }

    #[test]
    fn missing_direction() {
        let text = MINIMAL.replace(r#", "direction": "minimize""#, "");
        let d = parse_document(&text).unwrap_err();
        assert_eq!(d.kind, DiagnosticKind::MissingField);
        assert!(d.message.contains("direction"), "{}", d.message);
        assert!(d.position.is_some());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace(r#""objective""#, r#""extra": 1, "objective""#);
        assert_eq!(parse_document(&text).unwrap_err().kind, DiagnosticKind::UnknownKey);
        let text = MINIMAL.replace(r#""metric": "y""#, r#""metric": "y", "weight": 2"#);
        assert_eq!(parse_document(&text).unwrap_err().kind, DiagnosticKind::UnknownKey);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let text = MINIMAL.replace(r#""name": "n""#, r#""name": "x""#);
        assert_eq!(
            parse_document(&text).unwrap_err().kind,
            DiagnosticKind::DuplicateVariable
        );
    }

    #[test]
    fn syntax_errors_have_positions() {
        let d = parse_document("{\n  \"variables\": [,]\n}").unwrap_err();
        assert_eq!(d.kind, DiagnosticKind::Syntax);
        assert_eq!(d.position.unwrap().0, 2);
    }

    #[test]
    fn simulator_needs_pool_variables() {
        let text = MINIMAL.replace(
            r#""kind": "external_command", "command": {"template": "true"}"#,
            r#""kind": "simulator""#,
        );
        let d = parse_document(&text).unwrap_err();
        assert!(d.message.contains("http"), "{}", d.message);
    }

    #[test]
    fn baseline_must_be_in_bounds() {
        let text = MINIMAL.replace(r#""objective""#, r#""baseline": {"x": 0.5, "n": 9}, "objective""#);
        assert!(parse_document(&text).is_err());
        let text = MINIMAL.replace(r#""objective""#, r#""baseline": {"x": 0.5, "n": 2}, "objective""#);
        let doc = parse_document(&text).unwrap();
        assert_eq!(
            doc.baseline_config().unwrap().unwrap(),
            Configuration::new(vec![0.5, 2.0])
        );
    }

    mod props {
        use super::*;
        use crate::problem::{AffineExpr, Direction, Variable};
        use proptest::prelude::*;

        fn variable(i: usize) -> impl Strategy<Value = Variable> {
            prop_oneof![
                (-1000i64..1000, 1i64..1000)
                    .prop_map(move |(lo, w)| Variable::integer(&format!("v{i}"), lo, lo + w).unwrap()),
                (-1e6f64..1e6, 1e-3f64..1e6)
                    .prop_map(move |(lo, w)| Variable::real(&format!("v{i}"), lo, lo + w).unwrap()),
            ]
        }

        fn document() -> impl Strategy<Value = ProblemDocument> {
            (1usize..6)
                .prop_flat_map(|d| {
                    (
                        (0..d).map(variable).collect::<Vec<_>>(),
                        any::<bool>(),
                        -10.0f64..10.0,
                        any::<u64>(),
                    )
                })
                .prop_map(|(vars, max, c, seed)| {
                    let space = SearchSpace::new(vars).unwrap();
                    let first = space.variables()[0].name.clone();
                    ProblemDocument {
                        variables: space,
                        objective: ObjectiveSpec {
                            metric: "cost".into(),
                            direction: if max { Direction::Maximize } else { Direction::Minimize },
                        },
                        constraints: vec![Constraint::inequality(
                            "cap",
                            AffineExpr::new(&[(&first, 1.0), ("cost", -0.5)], c),
                        )],
                        search: SearchSettings {
                            seed,
                            ..SearchSettings::default()
                        },
                        executor: ExecutorSpec {
                            kind: ExecutorKind::ExternalCommand,
                            command: Some(crate::runner::CommandSpec {
                                template: "true".into(),
                                timeout: 5.0,
                                metrics_file: "metrics".into(),
                            }),
                            ..ExecutorSpec::default()
                        },
                        sensitivity: None,
                        baseline: None,
                    }
                })
        }

        proptest! {
            #[test]
            fn serialize_then_parse_is_identity(doc in document()) {
                let back = parse_document(&doc.to_json()).unwrap();
                prop_assert_eq!(back, doc);
            }
        }
    }
}
